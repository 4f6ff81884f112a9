// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only transformer: pre-norm blocks, per-head projections,
// rotary positions, bilinear MLP ((h W_gate) .* (h W_up)) W_down. Every
// attention matrix is a separate tape node so dL/dA is addressable.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/elastic_masks.hpp"
#include "moa/numerics/tape.hpp"

namespace moa {

enum class PositionEncoding { kRotary, kAbsolute };

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 64;
    int n_layers = 4;
    int n_heads_per_layer = 4;
    int head_dim = 16;
    int mlp_hidden = 128;
    int max_context = 4096;
    double rope_base = 10000.0;
    PositionEncoding positions = PositionEncoding::kRotary;
    /// Token excluded from attention keys and from the loss; -1 disables.
    int pad_token = 0;
    std::uint64_t seed = 0;

    int total_heads() const { return n_layers * n_heads_per_layer; }
    /// Throws InputError on inconsistent sizes.
    void validate() const;
};

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

struct LayerParams {
    MatrixXd attn_norm;                          // 1 x d
    std::vector<MatrixXd> wq, wk, wv;            // per head: d x head_dim
    std::vector<MatrixXd> wo;                    // per head: head_dim x d
    MatrixXd mlp_norm;                           // 1 x d
    MatrixXd w_gate, w_up;                       // d x hidden
    MatrixXd w_down;                             // hidden x d
};

struct ModelParams {
    MatrixXd embed;       // vocab x d
    MatrixXd pos_embed;   // max_context x d, absolute positions only
    std::vector<LayerParams> layers;
    MatrixXd final_norm;  // 1 x d
    MatrixXd unembed;     // d x vocab

    /// Visits every parameter in the fixed serialization order.
    template <typename Fn>
    void visit(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        visit_impl(*this, fn);
    }

    std::size_t scalar_count() const;

private:
    template <typename Self, typename Fn>
    static void visit_impl(Self& self, Fn& fn) {
        fn("embed", self.embed);
        if (self.pos_embed.size() != 0) fn("pos_embed", self.pos_embed);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& L = self.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            fn(p + "attn_norm", L.attn_norm);
            for (std::size_t h = 0; h < L.wq.size(); ++h) {
                const std::string q = p + "head." + std::to_string(h) + ".";
                fn(q + "wq", L.wq[h]);
                fn(q + "wk", L.wk[h]);
                fn(q + "wv", L.wv[h]);
                fn(q + "wo", L.wo[h]);
            }
            fn(p + "mlp_norm", L.mlp_norm);
            fn(p + "w_gate", L.w_gate);
            fn(p + "w_up", L.w_up);
            fn(p + "w_down", L.w_down);
        }
        fn("final_norm", self.final_norm);
        fn("unembed", self.unembed);
    }
};

struct Model {
    ModelConfig config;
    ModelParams params;
    std::uint64_t step = 0;
};

/// Deterministic initialization from config.seed.
Model init_model(const ModelConfig& config);

/// FNV-1a over the raw parameter bytes in serialization order.
std::uint64_t parameter_checksum(const Model& model);

/// Architecture plus parameter checksum; plans carry it to bind to a model.
std::string model_fingerprint(const Model& model);

/// Per-head additive attention masks for one sequence (heads layer-major).
/// Heads with equal patterns share one matrix.
struct HeadMasks {
    int n = 0;
    std::vector<std::shared_ptr<const MatrixXd>> per_head;
};

/// Pure causal masks, with pad-token key columns hidden.
HeadMasks causal_masks(const ModelConfig& config, std::span<const int> tokens);

/// Block sliding-window masks from `plan` evaluated at n = tokens.size().
HeadMasks plan_masks(const ModelConfig& config, const MoAPlan& plan, std::span<const int> tokens);

/// dense when plan is null.
HeadMasks masks_for(const ModelConfig& config, const MoAPlan* plan, std::span<const int> tokens);

/// Tape of one forward pass with the node ids needed downstream.
struct ForwardTrace {
    Tape<double> tape;
    NodeId logits;
    std::vector<NodeId> attention;  // per head, layer-major
    std::vector<NodeId> keys;       // post-rotary keys per head
    std::vector<NodeId> values;     // per head
    std::vector<NodeId> params;     // in ModelParams::visit order
};

enum class GradMode {
    kNone,       // inference only
    kAttention,  // dL/dA for every head, parameters untracked
    kFull,       // parameters tracked as well
};

ForwardTrace trace_forward(const Model& model, std::span<const int> tokens, const HeadMasks& masks, GradMode mode);

struct AttentionRecord {
    std::vector<MatrixXd> attention;  // per head, N x N
    std::vector<MatrixXd> grads;      // per head dL/dA, empty before backward
};

struct ForwardOutput {
    MatrixXd logits;  // N x vocab
    AttentionRecord record;
};

/// Logits and captured attention; dense causal when plan is null.
ForwardOutput forward(const Model& model, std::span<const int> tokens, const MoAPlan* plan = nullptr);

/// Logits only, with explicit masks.
MatrixXd forward_logits(const Model& model, std::span<const int> tokens, const HeadMasks& masks);

/// supervision[t] marks token t as a prediction target (predicted from row t-1).
using SupervisionMask = std::vector<bool>;

struct LossResult {
    double loss = 0.0;
    AttentionRecord record;
};

LossResult loss_and_attention_grads(const Model& model, std::span<const int> tokens,
                                    const SupervisionMask& supervision, const MoAPlan* plan = nullptr);

/// Mean supervised cross-entropy without gradients.
double supervised_loss(const Model& model, std::span<const int> tokens, const SupervisionMask& supervision,
                       const HeadMasks& masks);

/// Loss plus parameter gradients (same layout as ModelParams).
struct ParamGradients {
    double loss = 0.0;
    ModelParams grads;
};

ParamGradients loss_and_param_grads(const Model& model, std::span<const int> tokens,
                                    const SupervisionMask& supervision);

struct TrainingSequence {
    std::vector<int> tokens;
    SupervisionMask supervision;
};

struct TrainConfig {
    int steps = 2000;
    int batch_size = 32;
    double learning_rate = 3e-4;
    double min_lr_fraction = 0.1;
    int warmup_steps = 50;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    int threads = 0;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, std::uint64_t step) : std::runtime_error(what), step_(step) {}
    std::uint64_t step() const { return step_; }

private:
    std::uint64_t step_;
};

struct TrainResult {
    std::vector<double> loss_curve;  // mean batch loss per step
};

using TrainProgress = std::function<void(int step, double loss)>;

/// Adam with linear warmup and cosine decay; batches drawn deterministically from `corpus`.
TrainResult train(Model& model, const std::vector<TrainingSequence>& corpus, const TrainConfig& config,
                  const TrainProgress& progress = {});

/// Greedy continuation; returns only the new tokens.
std::vector<int> generate(const Model& model, std::span<const int> prompt, int max_new,
                          const MoAPlan* plan = nullptr);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace moa
