// SPDX-License-Identifier: Apache-2.0

#include "moa/influence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "moa/binary_io.hpp"

namespace moa {

std::vector<double> renormalization_delta(std::span<const double> row, int j) {
    if (j < 0 || j >= static_cast<int>(row.size())) throw DimensionError("renormalization_delta: index out of range");
    const double a = row[static_cast<std::size_t>(j)];
    if (a >= 1.0) throw DegenerateRowError("renormalization_delta: entry carries the whole row");
    const double factor = a / (1.0 - a);
    std::vector<double> delta(row.size());
    for (std::size_t n = 0; n < row.size(); ++n) delta[n] = row[n] * factor;
    delta[static_cast<std::size_t>(j)] = -a;
    return delta;
}

MatrixXd attention_influence(const MatrixXd& attention, const MatrixXd& grad) {
    if (attention.rows() != grad.rows() || attention.cols() != grad.cols()) {
        throw DimensionError("attention_influence: attention and gradient shapes differ");
    }
    // E_ij = -A_ij / (1 - A_ij) * (g_ij - sum_n g_in A_in)
    const Eigen::VectorXd expected = (grad.array() * attention.array()).rowwise().sum();
    MatrixXd e(attention.rows(), attention.cols());
    for (Eigen::Index i = 0; i < attention.rows(); ++i) {
        for (Eigen::Index j = 0; j < attention.cols(); ++j) {
            const double a = attention(i, j);
            if (a <= 0.0 || a >= 1.0) {
                e(i, j) = 0.0;
                continue;
            }
            const double denom = std::max(1.0 - a, kInfluenceDenominatorFloor);
            e(i, j) = -a / denom * (grad(i, j) - expected(i));
        }
    }
    return e;
}

int block_pair_count(int n, int block_size, int bi, int bj) {
    const int rows = std::min(n, (bi + 1) * block_size) - bi * block_size;
    const int cols = std::min(n, (bj + 1) * block_size) - bj * block_size;
    return rows * cols;
}

MatrixXd block_average(const MatrixXd& tokens, int block_size) {
    if (tokens.rows() != tokens.cols()) throw DimensionError("block_average: matrix must be square");
    if (block_size < 1) throw InputError("block_average: block size must be positive");
    const int n = static_cast<int>(tokens.rows());
    const int nb = ceil_div(n, block_size);
    MatrixXd out(nb, nb);
    for (int bi = 0; bi < nb; ++bi) {
        const int r0 = bi * block_size;
        const int rows = std::min(n, r0 + block_size) - r0;
        for (int bj = 0; bj < nb; ++bj) {
            const int c0 = bj * block_size;
            const int cols = std::min(n, c0 + block_size) - c0;
            out(bi, bj) = tokens.block(r0, c0, rows, cols).sum() / static_cast<double>(rows * cols);
        }
    }
    return out;
}

InfluenceTensor profile_level(const Model& model, const std::vector<CalibrationItem>& items, int level,
                              int block_size, int threads) {
    if (items.empty()) throw ContractError("profile: no calibration items at length " + std::to_string(level));
    for (const auto& item : items) {
        if (static_cast<int>(item.tokens.size()) != level) {
            throw ContractError("profile: item of length " + std::to_string(item.tokens.size()) + " at level " +
                                std::to_string(level));
        }
    }
    auto per_item = parallel_map<std::vector<MatrixXd>>(
        items.size(),
        [&](std::size_t i) {
            const LossResult r = loss_and_attention_grads(model, items[i].tokens, items[i].supervision);
            std::vector<MatrixXd> blocks;
            blocks.reserve(r.record.attention.size());
            for (std::size_t h = 0; h < r.record.attention.size(); ++h) {
                blocks.push_back(block_average(attention_influence(r.record.attention[h], r.record.grads[h]),
                                               block_size));
            }
            return blocks;
        },
        threads);

    InfluenceTensor out;
    out.length_level = level;
    out.block_size = block_size;
    out.item_count = static_cast<int>(items.size());
    out.heads = std::move(per_item[0]);
    for (std::size_t i = 1; i < per_item.size(); ++i) {
        for (std::size_t h = 0; h < out.heads.size(); ++h) out.heads[h] += per_item[i][h];
    }
    for (auto& m : out.heads) m /= static_cast<double>(items.size());
    return out;
}

std::vector<InfluenceTensor> profile(const Model& model, const std::vector<CalibrationItem>& items,
                                     const std::vector<int>& levels, int block_size, int threads) {
    std::map<int, std::vector<CalibrationItem>> by_level;
    for (const auto& item : items) by_level[item.level].push_back(item);
    std::vector<InfluenceTensor> out;
    for (int level : levels) out.push_back(profile_level(model, by_level[level], level, block_size, threads));
    return out;
}

void save_influence(const InfluenceTensor& tensor, const std::string& path) {
    const int nb = tensor.n_blocks();
    nlohmann::json header = {{"length_level", tensor.length_level},
                             {"block_size", tensor.block_size},
                             {"n_blocks", nb},
                             {"head_count", tensor.head_count()},
                             {"item_count", tensor.item_count}};
    std::vector<double> payload;
    payload.reserve(static_cast<std::size_t>(tensor.head_count()) * nb * nb);
    for (const auto& m : tensor.heads) payload.insert(payload.end(), m.data(), m.data() + m.size());
    write_json_payload(path, header, payload);
}

InfluenceTensor load_influence(const std::string& path) {
    JsonPayload file = read_json_payload(path);
    InfluenceTensor t;
    int nb = 0, heads = 0;
    try {
        t.length_level = file.header.at("length_level");
        t.block_size = file.header.at("block_size");
        t.item_count = file.header.at("item_count");
        nb = file.header.at("n_blocks");
        heads = file.header.at("head_count");
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": malformed influence header: " + e.what());
    }
    if (file.payload.size() != static_cast<std::size_t>(heads) * nb * nb) {
        throw InputError(path + ": payload does not match head_count x n_blocks^2");
    }
    for (int h = 0; h < heads; ++h) {
        t.heads.push_back(Eigen::Map<const MatrixXd>(file.payload.data() + static_cast<std::size_t>(h) * nb * nb, nb, nb));
    }
    return t;
}

int RuleLossTable::length_index(int n) const {
    const auto it = std::find(lengths.begin(), lengths.end(), n);
    if (it == lengths.end()) throw InputError("rule table has no length " + std::to_string(n));
    return static_cast<int>(it - lengths.begin());
}

double masked_influence(const MatrixXd& block_influence, const BlockMask& mask) {
    if (block_influence.rows() != mask.n_blocks || block_influence.cols() != mask.n_blocks) {
        throw DimensionError("masked_influence: block grid does not match mask");
    }
    double total = 0.0;
    for (int bi = 0; bi < mask.n_blocks; ++bi) {
        for (int bj = 0; bj <= bi; ++bj) {
            if (mask.visible(bi, bj)) continue;
            total += block_influence(bi, bj) * block_pair_count(mask.n, mask.block_size, bi, bj);
        }
    }
    return total;
}

RuleLossTable rule_loss_table(const std::vector<InfluenceTensor>& influence, const std::vector<ElasticRule>& rules,
                              const MaskGeometry& geometry, int heads_per_layer) {
    if (influence.empty()) throw ContractError("rule_loss_table: no influence tensors");
    if (heads_per_layer < 1) throw InputError("rule_loss_table: heads_per_layer must be positive");
    RuleLossTable table;
    table.rules = rules;
    table.geometry = geometry;
    table.heads_per_layer = heads_per_layer;
    const int heads = influence.front().head_count();
    if (heads % heads_per_layer != 0) throw InputError("rule_loss_table: head count not divisible by heads_per_layer");
    table.n_layers = heads / heads_per_layer;
    for (const auto& t : influence) {
        if (t.block_size != geometry.block_size) {
            throw ContractError("rule_loss_table: influence profiled with block size " + std::to_string(t.block_size));
        }
        if (t.head_count() != heads) throw DimensionError("rule_loss_table: head count differs across lengths");
        table.lengths.push_back(t.length_level);
        std::vector<BlockMask> masks;
        std::vector<double> dens;
        for (const auto& r : rules) {
            masks.push_back(build_mask(r, t.length_level, geometry));
            dens.push_back(density_of(r, t.length_level, geometry));
        }
        std::vector<std::vector<double>> loss(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            for (const auto& m : masks) loss[h].push_back(masked_influence(t.heads[h], m));
        }
        table.loss.push_back(std::move(loss));
        table.density.push_back(std::move(dens));
    }
    return table;
}

nlohmann::json rule_table_to_json(const RuleLossTable& table) {
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& r : table.rules) rules.push_back({{"alpha", r.alpha}, {"beta", r.beta}});
    return {{"lengths", table.lengths},
            {"rules", rules},
            {"block_size", table.geometry.block_size},
            {"sink_blocks", table.geometry.sink_blocks},
            {"n_layers", table.n_layers},
            {"heads_per_layer", table.heads_per_layer},
            {"loss", table.loss},
            {"density", table.density}};
}

RuleLossTable rule_table_from_json(const nlohmann::json& j) {
    RuleLossTable t;
    t.lengths = j.at("lengths").get<std::vector<int>>();
    for (const auto& r : j.at("rules")) t.rules.push_back({r.at("alpha").get<double>(), r.at("beta").get<double>()});
    t.geometry.block_size = j.at("block_size");
    t.geometry.sink_blocks = j.at("sink_blocks");
    t.n_layers = j.at("n_layers");
    t.heads_per_layer = j.at("heads_per_layer");
    t.loss = j.at("loss").get<std::vector<std::vector<std::vector<double>>>>();
    t.density = j.at("density").get<std::vector<std::vector<double>>>();
    if (t.loss.size() != t.lengths.size() || t.density.size() != t.lengths.size()) {
        throw InputError("rule table: per-length arrays do not match lengths");
    }
    return t;
}

double soe_of(const std::vector<MatrixXd>& matrices) {
    if (matrices.empty()) throw ContractError("soe: no attention matrices");
    const Eigen::Index n = matrices.front().rows();
    if (n < 2) throw ContractError("soe: needs at least 2 positions");
    MatrixXd mean = MatrixXd::Zero(n, n);
    for (const auto& m : matrices) {
        if (m.rows() != n || m.cols() != n) throw DimensionError("soe: attention matrices differ in shape");
        mean += m;
    }
    mean /= static_cast<double>(matrices.size());
    double sum = 0.0, sq = 0.0;
    const double count = static_cast<double>(n * (n - 1) / 2);
    for (Eigen::Index i = 1; i < n; ++i) {
        for (Eigen::Index j = 0; j < i; ++j) sum += mean(i, j);
    }
    const double mu = sum / count;
    for (Eigen::Index i = 1; i < n; ++i) {
        for (Eigen::Index j = 0; j < i; ++j) sq += (mean(i, j) - mu) * (mean(i, j) - mu);
    }
    return std::sqrt(sq / count);
}

std::vector<double> soe(const Model& model, const std::vector<std::vector<int>>& sentences, int threads) {
    if (sentences.size() < 2) throw ContractError("soe: needs at least 2 sentences");
    for (const auto& s : sentences) {
        if (s.size() != sentences.front().size()) throw DimensionError("soe: sentences must share one length");
    }
    auto records = parallel_map<std::vector<MatrixXd>>(
        sentences.size(), [&](std::size_t i) { return forward(model, sentences[i]).record.attention; }, threads);
    const int heads = model.config.total_heads();
    std::vector<double> out;
    for (int h = 0; h < heads; ++h) {
        std::vector<MatrixXd> per;
        for (const auto& r : records) per.push_back(r[h]);
        out.push_back(soe_of(per));
    }
    return out;
}

}  // namespace moa
