#pragma once

#include "tsattr/models.hpp"

namespace tsattr::attr {

// Attribution methods score a model through this narrow surface: a forward
// graph per sequence length plus parameter bindings. Gradient methods walk
// the graph; perturbation methods only call scores().
class Model {
  public:
    virtual ~Model() = default;
    virtual int64_t features() const = 0;
    virtual const models::ForwardGraph& graph(int64_t t_len) const = 0;
    virtual Bindings bind(const Tensor& x) const = 0;

    // pre-sigmoid scores, T x C
    Tensor scores(const Tensor& x) const {
        const models::ForwardGraph& fg = graph(x.shape[0]);
        return evaluate(fg.graph, bind(x))[static_cast<size_t>(fg.logit)];
    }
    // sigmoid of scores, T x C
    Tensor probabilities(const Tensor& x) const {
        const models::ForwardGraph& fg = graph(x.shape[0]);
        return evaluate(fg.graph, bind(x))[static_cast<size_t>(fg.prob)];
    }
};

class PredictorAdapter final : public Model {
  public:
    explicit PredictorAdapter(const models::PredictorModel& m) : model_(m) {}
    int64_t features() const override { return model_.config.features; }
    const models::ForwardGraph& graph(int64_t t_len) const override {
        return model_.forward_graph(t_len);
    }
    Bindings bind(const Tensor& x) const override { return model_.bindings_for(x); }

  private:
    const models::PredictorModel& model_;
};

}  // namespace tsattr::attr
