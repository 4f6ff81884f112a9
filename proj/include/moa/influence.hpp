// SPDX-License-Identifier: Apache-2.0
//
// Attention influence: the first-order change in loss when one attention entry
// is masked and its row renormalized, aggregated to blocks over a calibration
// set, then summed over each rule's masked blocks.

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/datasets.hpp"
#include "moa/elastic_masks.hpp"
#include "moa/toy_model.hpp"

namespace moa {

/// Lower bound on 1 - A_ij when a single entry carries (almost) all of its row.
inline constexpr double kInfluenceDenominatorFloor = 1e-9;

/// Row change from masking entry j and renormalizing the rest.
/// Throws DegenerateRowError when row[j] == 1.
std::vector<double> renormalization_delta(std::span<const double> row, int j);

/// E_ij = sum_n g_in * dA_in for dA = renormalization_delta(A_i, j).
/// Entries with A_ij == 0 give 0; a row's only visible entry gives 0.
MatrixXd attention_influence(const MatrixXd& attention, const MatrixXd& grad);

/// Mean of each block_size x block_size tile (partial edge tiles average over
/// the pairs they hold).
MatrixXd block_average(const MatrixXd& tokens, int block_size);

/// Number of token pairs inside block (bi, bj) of an n x n matrix.
int block_pair_count(int n, int block_size, int bi, int bj);

struct InfluenceTensor {
    int length_level = 0;
    int block_size = 1;
    int item_count = 0;
    std::vector<MatrixXd> heads;  // n_blocks x n_blocks, layer-major head order

    int n_blocks() const { return heads.empty() ? 0 : static_cast<int>(heads.front().rows()); }
    int head_count() const { return static_cast<int>(heads.size()); }
};

/// Item tokens must all have `level` length. Throws ContractError on an empty set.
InfluenceTensor profile_level(const Model& model, const std::vector<CalibrationItem>& items, int level,
                              int block_size, int threads = 0);

/// One tensor per level, items grouped by CalibrationItem::level.
std::vector<InfluenceTensor> profile(const Model& model, const std::vector<CalibrationItem>& items,
                                     const std::vector<int>& levels, int block_size, int threads = 0);

void save_influence(const InfluenceTensor& tensor, const std::string& path);
InfluenceTensor load_influence(const std::string& path);

struct RuleLossTable {
    std::vector<int> lengths;
    std::vector<ElasticRule> rules;
    MaskGeometry geometry;
    int n_layers = 0;
    int heads_per_layer = 0;
    /// loss[l][h][r]: profiled loss of head h under rule r at lengths[l].
    std::vector<std::vector<std::vector<double>>> loss;
    /// density[l][r]
    std::vector<std::vector<double>> density;

    int head_count() const { return n_layers * heads_per_layer; }
    int length_index(int n) const;  // throws InputError when n was not profiled
};

/// Sum of influence over the blocks each rule masks, weighted by block pair counts.
double masked_influence(const MatrixXd& block_influence, const BlockMask& mask);

/// Throws ContractError when a tensor's block size differs from the geometry's.
RuleLossTable rule_loss_table(const std::vector<InfluenceTensor>& influence, const std::vector<ElasticRule>& rules,
                              const MaskGeometry& geometry, int heads_per_layer);

nlohmann::json rule_table_to_json(const RuleLossTable& table);
RuleLossTable rule_table_from_json(const nlohmann::json& j);

/// Population standard deviation over i > j of the mean of `matrices`.
/// Throws ContractError for fewer than 2 positions or mismatched shapes.
double soe_of(const std::vector<MatrixXd>& matrices);

/// SoE per head over dense causal forwards of equal-length sentences.
std::vector<double> soe(const Model& model, const std::vector<std::vector<int>>& sentences, int threads = 0);

}  // namespace moa
