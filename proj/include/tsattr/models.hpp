#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsattr/datasets.hpp"
#include "tsattr/graph.hpp"
#include "tsattr/metrics.hpp"

namespace tsattr::models {

enum class Arch { Transformer, Crossformer, Retain };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);

struct ModelConfig {
    Arch arch = Arch::Crossformer;
    int64_t features = 16;
    int64_t classes = 1;
    int64_t max_seq = 128;  // sizes learned position tables

    int64_t layers = 2;   // transformer depth
    int64_t d_model = 32;
    int64_t heads = 4;

    int64_t seg_len = 8;  // crossformer segment length
    int64_t cross_d = 16, cross_heads = 2;

    int64_t retain_hidden = 24, retain_emb = 24;

    uint64_t init_seed = 1;
};

// forward graph plus the node ids callers care about
struct ForwardGraph {
    Graph graph;
    int x = -1;      // input leaf "x", T x F
    int logit = -1;  // T x C
    int prob = -1;   // T x C, sigmoid of logit
    std::map<std::string, int> taps;  // named intermediates (retain: alpha, contrib)
};

class PredictorModel {
  public:
    explicit PredictorModel(ModelConfig cfg);

    ModelConfig config;
    std::map<std::string, Tensor> params;

    // graph for sequences of length t_len (<= max_seq), cached
    const ForwardGraph& forward_graph(int64_t t_len) const;

    Bindings bindings_for(const Tensor& x) const;
    Tensor forward(const Tensor& x) const;  // T x C probabilities

    int64_t param_count() const;
    uint64_t param_hash() const;  // fnv1a64 over parameter bytes
    void invalidate_cache();      // call after mutating params

  private:
    mutable std::map<int64_t, ForwardGraph> graph_cache_;
    mutable Bindings binding_cache_;
    mutable bool binding_cache_valid_ = false;
};

struct RetainAttribution {
    Tensor probs;         // T x C
    Tensor attributions;  // T x F, |contribution| toward the final-step logit
    Tensor alpha;         // T x T causal step weights
    Tensor contrib;       // T x F signed per-cell contribution terms
    double output_bias = 0.0;
};

// two recurrent passes (step weights and channel gates) plus the linear
// contribution decomposition; only valid for retain models
RetainAttribution retain_forward_and_attribute(const PredictorModel& model, const Tensor& x);

struct TrainConfig {
    int64_t epochs = 40;
    int64_t batch = 16;
    double lr = 3e-3;
    uint64_t seed = 1;
    double pos_weight = 10.0;  // class weight for positive steps
    int64_t patience = 8;      // early stop on validation AUPRC
};

struct EpochStats {
    double train_loss = 0;
    double val_auroc = 0, val_auprc = 0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    int64_t best_epoch = -1;
    double best_val_auprc = 0;
};

TrainResult train(PredictorModel& model, const datasets::Dataset& train_set,
                  const datasets::Dataset& val_set, const TrainConfig& cfg);

}  // namespace tsattr::models
