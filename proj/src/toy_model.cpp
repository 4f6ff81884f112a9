// SPDX-License-Identifier: Apache-2.0

#include "moa/toy_model.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "moa/binary_io.hpp"
#include "moa/util.hpp"

namespace moa {

void ModelConfig::validate() const {
    if (vocab_size < 2 || n_layers < 1 || n_heads_per_layer < 1 || head_dim < 2 || mlp_hidden < 1) {
        throw InputError("model config: sizes must be positive");
    }
    if (d_model != n_heads_per_layer * head_dim) {
        throw InputError("model config: d_model (" + std::to_string(d_model) + ") != n_heads_per_layer * head_dim (" +
                         std::to_string(n_heads_per_layer * head_dim) + ")");
    }
    if (positions == PositionEncoding::kRotary && head_dim % 2 != 0) {
        throw InputError("model config: rotary positions need an even head_dim");
    }
    if (max_context < 1) throw InputError("model config: max_context must be positive");
    if (pad_token >= vocab_size) throw InputError("model config: pad_token outside vocabulary");
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads_per_layer", c.n_heads_per_layer},
            {"head_dim", c.head_dim},
            {"mlp_hidden", c.mlp_hidden},
            {"max_context", c.max_context},
            {"rope_base", c.rope_base},
            {"positions", c.positions == PositionEncoding::kRotary ? "rotary" : "absolute"},
            {"pad_token", c.pad_token},
            {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads_per_layer = j.value("n_heads_per_layer", c.n_heads_per_layer);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.max_context = j.value("max_context", c.max_context);
    c.rope_base = j.value("rope_base", c.rope_base);
    const std::string pos = j.value("positions", std::string("rotary"));
    if (pos == "rotary") {
        c.positions = PositionEncoding::kRotary;
    } else if (pos == "absolute") {
        c.positions = PositionEncoding::kAbsolute;
    } else {
        throw InputError("model config: unknown positions '" + pos + "'");
    }
    c.pad_token = j.value("pad_token", c.pad_token);
    c.seed = j.value("seed", c.seed);
    return c;
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const MatrixXd& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

namespace {

MatrixXd gaussian(Rng& rng, int rows, int cols, double stddev) {
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
    return m;
}

std::vector<MatrixXd*> param_list(ModelParams& p) {
    std::vector<MatrixXd*> out;
    p.visit([&](const std::string&, MatrixXd& m) { out.push_back(&m); });
    return out;
}

ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    z.visit([](const std::string&, MatrixXd& m) { m.setZero(); });
    return z;
}

}  // namespace

Model init_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(mix_seed(config.seed, 0x6d6f6465));
    const int d = config.d_model;
    const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
    ModelParams& p = model.params;
    p.embed = gaussian(rng, config.vocab_size, d, 1.0);
    if (config.positions == PositionEncoding::kAbsolute) p.pos_embed = gaussian(rng, config.max_context, d, 0.1);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerParams L;
        L.attn_norm = MatrixXd::Ones(1, d);
        for (int h = 0; h < config.n_heads_per_layer; ++h) {
            L.wq.push_back(gaussian(rng, d, config.head_dim, 1.0 / std::sqrt(d)));
            L.wk.push_back(gaussian(rng, d, config.head_dim, 1.0 / std::sqrt(d)));
            L.wv.push_back(gaussian(rng, d, config.head_dim, 1.0 / std::sqrt(d)));
            L.wo.push_back(gaussian(rng, config.head_dim, d, residual_scale / std::sqrt(d)));
        }
        L.mlp_norm = MatrixXd::Ones(1, d);
        L.w_gate = gaussian(rng, d, config.mlp_hidden, 1.0 / std::sqrt(d));
        L.w_up = gaussian(rng, d, config.mlp_hidden, 1.0 / std::sqrt(d));
        L.w_down = gaussian(rng, config.mlp_hidden, d, residual_scale / std::sqrt(config.mlp_hidden));
        p.layers.push_back(std::move(L));
    }
    p.final_norm = MatrixXd::Ones(1, d);
    p.unembed = gaussian(rng, d, config.vocab_size, 1.0 / std::sqrt(d));
    return model;
}

std::uint64_t parameter_checksum(const Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    model.params.visit([&](const std::string&, const MatrixXd& m) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
        for (Eigen::Index i = 0; i < m.size() * static_cast<Eigen::Index>(sizeof(double)); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    });
    return h;
}

std::string model_fingerprint(const Model& model) {
    const auto& c = model.config;
    std::ostringstream ss;
    ss << "L" << c.n_layers << "H" << c.n_heads_per_layer << "D" << c.head_dim << "V" << c.vocab_size << "-"
       << std::hex << parameter_checksum(model);
    return ss.str();
}

namespace {

void hide_pad_columns(MatrixXd& m, const ModelConfig& config, std::span<const int> tokens) {
    if (config.pad_token < 0) return;
    for (std::size_t k = 0; k < tokens.size(); ++k) {
        if (tokens[k] == config.pad_token) m.col(static_cast<Eigen::Index>(k)).setConstant(kMaskSentinel);
    }
}

bool has_pad(const ModelConfig& config, std::span<const int> tokens) {
    if (config.pad_token < 0) return false;
    for (int t : tokens) {
        if (t == config.pad_token) return true;
    }
    return false;
}

}  // namespace

HeadMasks causal_masks(const ModelConfig& config, std::span<const int> tokens) {
    const int n = static_cast<int>(tokens.size());
    MatrixXd m = causal_block_mask(n, 1).additive();
    if (has_pad(config, tokens)) hide_pad_columns(m, config, tokens);
    auto shared = std::make_shared<const MatrixXd>(std::move(m));
    return {n, std::vector<std::shared_ptr<const MatrixXd>>(config.total_heads(), shared)};
}

HeadMasks plan_masks(const ModelConfig& config, const MoAPlan& plan, std::span<const int> tokens) {
    if (static_cast<int>(plan.layers.size()) != config.n_layers) {
        throw ContractError("plan has " + std::to_string(plan.layers.size()) + " layers, model has " +
                            std::to_string(config.n_layers));
    }
    const int n = static_cast<int>(tokens.size());
    const bool pads = has_pad(config, tokens);
    HeadMasks out;
    out.n = n;
    std::map<int, std::shared_ptr<const MatrixXd>> by_window;
    for (const auto& layer : plan.layers) {
        if (static_cast<int>(layer.size()) != config.n_heads_per_layer) {
            throw ContractError("plan layer head count does not match model");
        }
        for (const auto& rule : layer) {
            const BlockMask bm = build_mask(rule, n, plan.geometry);
            auto it = by_window.find(bm.window_blocks);
            if (it == by_window.end()) {
                MatrixXd m = bm.additive();
                if (pads) hide_pad_columns(m, config, tokens);
                it = by_window.emplace(bm.window_blocks, std::make_shared<const MatrixXd>(std::move(m))).first;
            }
            out.per_head.push_back(it->second);
        }
    }
    return out;
}

HeadMasks masks_for(const ModelConfig& config, const MoAPlan* plan, std::span<const int> tokens) {
    return plan ? plan_masks(config, *plan, tokens) : causal_masks(config, tokens);
}

ForwardTrace trace_forward(const Model& model, std::span<const int> tokens, const HeadMasks& masks, GradMode mode) {
    const ModelConfig& c = model.config;
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw InputError("forward: empty token sequence");
    if (c.positions == PositionEncoding::kAbsolute && n > c.max_context) {
        throw InputError("forward: sequence longer than max_context");
    }
    for (int t : tokens) {
        if (t < 0 || t >= c.vocab_size) throw InputError("forward: token " + std::to_string(t) + " out of vocabulary");
    }
    if (masks.n != n || static_cast<int>(masks.per_head.size()) != c.total_heads()) {
        throw DimensionError("forward: masks do not match sequence/heads");
    }

    ForwardTrace tr;
    Tape<double>& t = tr.tape;
    const bool full = mode == GradMode::kFull;
    // kAttention tracks only the embedding table so activations carry gradients
    // while weight-gradient products are skipped.
    model.params.visit([&](const std::string& name, const MatrixXd& m) {
        const bool track = full || (mode == GradMode::kAttention && name == "embed");
        tr.params.push_back(t.leaf(m, track));
    });
    std::size_t pi = 0;
    auto next_param = [&] { return tr.params[pi++]; };

    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = i;

    NodeId x = embedding(t, next_param(), tokens);
    if (c.positions == PositionEncoding::kAbsolute) x = add(t, x, embedding(t, next_param(), std::span<const int>(positions)));

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
    int head = 0;
    for (int l = 0; l < c.n_layers; ++l) {
        NodeId norm_g = next_param();
        NodeId h = rms_norm(t, x, norm_g);
        std::optional<NodeId> attn_out;
        for (int hh = 0; hh < c.n_heads_per_layer; ++hh, ++head) {
            NodeId wq = next_param();
            NodeId wk = next_param();
            NodeId wv = next_param();
            NodeId wo = next_param();
            NodeId q = matmul(t, h, wq);
            NodeId k = matmul(t, h, wk);
            NodeId v = matmul(t, h, wv);
            if (c.positions == PositionEncoding::kRotary) {
                q = rotary(t, q, std::span<const int>(positions), c.rope_base);
                k = rotary(t, k, std::span<const int>(positions), c.rope_base);
            }
            NodeId s = matmul(t, scale(t, q, inv_sqrt), k, Transpose::kRight);
            NodeId a = softmax_rows(t, s, *masks.per_head[head]);
            NodeId o = matmul(t, matmul(t, a, v), wo);
            attn_out = attn_out ? add(t, *attn_out, o) : o;
            tr.attention.push_back(a);
            tr.keys.push_back(k);
            tr.values.push_back(v);
        }
        x = add(t, x, *attn_out);
        NodeId mlp_g = next_param();
        NodeId h2 = rms_norm(t, x, mlp_g);
        NodeId gate = matmul(t, h2, next_param());
        NodeId up = matmul(t, h2, next_param());
        NodeId down = matmul(t, hadamard(t, gate, up), next_param());
        x = add(t, x, down);
    }
    NodeId fin = rms_norm(t, x, next_param());
    tr.logits = matmul(t, fin, next_param());
    return tr;
}

ForwardOutput forward(const Model& model, std::span<const int> tokens, const MoAPlan* plan) {
    ForwardTrace tr = trace_forward(model, tokens, masks_for(model.config, plan, tokens), GradMode::kNone);
    ForwardOutput out;
    out.logits = tr.tape.value(tr.logits);
    for (NodeId a : tr.attention) out.record.attention.push_back(tr.tape.value(a));
    return out;
}

MatrixXd forward_logits(const Model& model, std::span<const int> tokens, const HeadMasks& masks) {
    ForwardTrace tr = trace_forward(model, tokens, masks, GradMode::kNone);
    return tr.tape.value(tr.logits);
}

namespace {

struct ShiftedTargets {
    std::vector<int> targets;
    std::vector<bool> active;
};

ShiftedTargets shift_targets(std::span<const int> tokens, const SupervisionMask& supervision) {
    if (supervision.size() != tokens.size()) throw DimensionError("supervision length must equal token count");
    if (!supervision.empty() && supervision[0]) {
        throw ContractError("supervision: position 0 has no preceding context to predict it");
    }
    ShiftedTargets s;
    s.targets.assign(tokens.size(), 0);
    s.active.assign(tokens.size(), false);
    bool any = false;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        if (!supervision[t]) continue;
        s.targets[t - 1] = tokens[t];
        s.active[t - 1] = true;
        any = true;
    }
    if (!any) throw ContractError("supervision mask has no active position");
    return s;
}

NodeId append_loss(ForwardTrace& tr, const ShiftedTargets& s) {
    // std::vector<bool> is packed; copy into a contiguous bool buffer for span
    std::unique_ptr<bool[]> act(new bool[s.active.size()]);
    for (std::size_t i = 0; i < s.active.size(); ++i) act[i] = s.active[i];
    return cross_entropy(tr.tape, tr.logits, std::span<const int>(s.targets),
                         std::span<const bool>(act.get(), s.active.size()));
}

}  // namespace

LossResult loss_and_attention_grads(const Model& model, std::span<const int> tokens,
                                    const SupervisionMask& supervision, const MoAPlan* plan) {
    const ShiftedTargets s = shift_targets(tokens, supervision);
    ForwardTrace tr = trace_forward(model, tokens, masks_for(model.config, plan, tokens), GradMode::kAttention);
    NodeId loss = append_loss(tr, s);
    tr.tape.backward(loss);
    LossResult r;
    r.loss = tr.tape.value(loss)(0, 0);
    for (NodeId a : tr.attention) {
        r.record.attention.push_back(tr.tape.value(a));
        r.record.grads.push_back(tr.tape.grad(a));
    }
    return r;
}

double supervised_loss(const Model& model, std::span<const int> tokens, const SupervisionMask& supervision,
                       const HeadMasks& masks) {
    const ShiftedTargets s = shift_targets(tokens, supervision);
    ForwardTrace tr = trace_forward(model, tokens, masks, GradMode::kNone);
    return tr.tape.value(append_loss(tr, s))(0, 0);
}

ParamGradients loss_and_param_grads(const Model& model, std::span<const int> tokens,
                                    const SupervisionMask& supervision) {
    const ShiftedTargets s = shift_targets(tokens, supervision);
    ForwardTrace tr = trace_forward(model, tokens, causal_masks(model.config, tokens), GradMode::kFull);
    NodeId loss = append_loss(tr, s);
    tr.tape.backward(loss);
    ParamGradients g;
    g.loss = tr.tape.value(loss)(0, 0);
    g.grads = model.params;
    std::size_t i = 0;
    g.grads.visit([&](const std::string&, MatrixXd& m) { m = tr.tape.grad(tr.params[i++]); });
    return g;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"min_lr_fraction", c.min_lr_fraction},
            {"warmup_steps", c.warmup_steps},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.min_lr_fraction = j.value("min_lr_fraction", c.min_lr_fraction);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    return c;
}

TrainResult train(Model& model, const std::vector<TrainingSequence>& corpus, const TrainConfig& config,
                  const TrainProgress& progress) {
    TrainResult result;
    if (config.steps <= 0) return result;
    if (corpus.empty()) throw ContractError("train: empty corpus");

    ModelParams m1 = zeros_like(model.params);
    ModelParams m2 = zeros_like(model.params);
    std::vector<MatrixXd*> params = param_list(model.params);
    std::vector<MatrixXd*> mom1 = param_list(m1);
    std::vector<MatrixXd*> mom2 = param_list(m2);
    Rng rng(mix_seed(config.seed, 0x747261696e));

    for (int step = 0; step < config.steps; ++step) {
        std::vector<std::size_t> batch(config.batch_size);
        for (auto& b : batch) b = rng.below(corpus.size());

        std::vector<ParamGradients> grads;
        try {
            grads = parallel_map<ParamGradients>(
                batch.size(),
                [&](std::size_t i) {
                    const auto& seq = corpus[batch[i]];
                    return loss_and_param_grads(model, seq.tokens, seq.supervision);
                },
                config.threads);
        } catch (const NonFiniteError& e) {
            throw TrainingError(std::string("training diverged: ") + e.what(), model.step);
        }

        double loss = 0.0;
        ModelParams total = std::move(grads[0].grads);
        loss += grads[0].loss;
        std::vector<MatrixXd*> acc = param_list(total);
        for (std::size_t i = 1; i < grads.size(); ++i) {
            loss += grads[i].loss;
            std::vector<MatrixXd*> gi = param_list(grads[i].grads);
            for (std::size_t p = 0; p < acc.size(); ++p) *acc[p] += *gi[p];
        }
        const double inv = 1.0 / static_cast<double>(grads.size());
        loss *= inv;
        if (!std::isfinite(loss)) throw TrainingError("training diverged (non-finite loss)", model.step);

        double norm2 = 0.0;
        for (MatrixXd* g : acc) {
            *g *= inv;
            norm2 += g->squaredNorm();
        }
        const double norm = std::sqrt(norm2);
        const double clip = (config.grad_clip > 0.0 && norm > config.grad_clip) ? config.grad_clip / norm : 1.0;

        double lr = config.learning_rate;
        if (step < config.warmup_steps) {
            lr *= static_cast<double>(step + 1) / config.warmup_steps;
        } else {
            const double progress_frac =
                static_cast<double>(step - config.warmup_steps) / std::max(1, config.steps - config.warmup_steps);
            const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress_frac));
            lr *= config.min_lr_fraction + (1.0 - config.min_lr_fraction) * cosine;
        }
        const double t = static_cast<double>(model.step + 1);
        const double bc1 = 1.0 - std::pow(config.beta1, t);
        const double bc2 = 1.0 - std::pow(config.beta2, t);
        for (std::size_t p = 0; p < params.size(); ++p) {
            MatrixXd g = *acc[p] * clip;
            *mom1[p] = config.beta1 * *mom1[p] + (1.0 - config.beta1) * g;
            *mom2[p] = config.beta2 * *mom2[p] + (1.0 - config.beta2) * g.cwiseAbs2();
            params[p]->array() -= lr * (mom1[p]->array() / bc1) / ((mom2[p]->array() / bc2).sqrt() + config.adam_eps);
        }
        ++model.step;
        result.loss_curve.push_back(loss);
        if (progress) progress(step, loss);
    }
    return result;
}

std::vector<int> generate(const Model& model, std::span<const int> prompt, int max_new, const MoAPlan* plan) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int i = 0; i < max_new; ++i) {
        MatrixXd logits = forward_logits(model, seq, masks_for(model.config, plan, seq));
        Eigen::Index best = 0;
        logits.row(logits.rows() - 1).maxCoeff(&best);
        seq.push_back(static_cast<int>(best));
        out.push_back(static_cast<int>(best));
    }
    return out;
}

void save_checkpoint(const Model& model, const std::string& path) {
    nlohmann::json header;
    header["format"] = "moa-checkpoint/1";
    header["config"] = config_to_json(model.config);
    header["seed"] = model.config.seed;
    header["step"] = model.step;
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<double> payload;
    payload.reserve(model.params.scalar_count());
    model.params.visit([&](const std::string& name, const MatrixXd& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        payload.insert(payload.end(), m.data(), m.data() + m.size());
    });
    header["tensors"] = std::move(tensors);
    write_json_payload(path, header, payload);
}

Model load_checkpoint(const std::string& path) {
    JsonPayload file = read_json_payload(path);
    if (file.header.value("format", std::string()) != "moa-checkpoint/1") {
        throw InputError(path + " is not a moa checkpoint");
    }
    Model model = init_model(config_from_json(file.header.at("config")));
    model.step = file.header.value("step", std::uint64_t{0});
    const auto& tensors = file.header.at("tensors");
    std::size_t idx = 0;
    std::size_t offset = 0;
    model.params.visit([&](const std::string& name, MatrixXd& m) {
        if (idx >= tensors.size()) throw InputError("checkpoint is missing tensor " + name);
        const auto& meta = tensors[idx++];
        if (meta.at("name").get<std::string>() != name || meta.at("rows").get<Eigen::Index>() != m.rows() ||
            meta.at("cols").get<Eigen::Index>() != m.cols()) {
            throw InputError("checkpoint tensor layout mismatch at " + name);
        }
        if (offset + static_cast<std::size_t>(m.size()) > file.payload.size()) throw InputError("checkpoint truncated");
        std::memcpy(m.data(), file.payload.data() + offset, sizeof(double) * static_cast<std::size_t>(m.size()));
        offset += static_cast<std::size_t>(m.size());
    });
    if (idx != tensors.size() || offset != file.payload.size()) throw InputError("checkpoint has extra tensors");
    return model;
}

}  // namespace moa
