// SPDX-License-Identifier: Apache-2.0
//
// Stage orchestration: gen -> train -> calibrate -> profile -> optimize ->
// validate -> evaluate -> simulate. Each stage records the hashes of what it
// read and wrote in <out>/manifest.json and is skipped when nothing changed.

#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/datasets.hpp"
#include "moa/elastic_masks.hpp"
#include "moa/toy_model.hpp"

namespace moa {

/// Missing or stale upstream artifact; names the stage to re-run.
class DependencyError : public std::runtime_error {
public:
    DependencyError(const std::string& what, std::string stage) : std::runtime_error(what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct TrainPhase {
    int length = 64;
    int steps = 6000;
    int batch_size = 16;
    double learning_rate = 2e-3;
    int corpus_size = 20000;
    CorpusMix mix{1.0, 0.5, true, 0};
};

struct EvalConfig {
    std::vector<int> lengths{128, 256, 384, 512, 640, 768};
    std::vector<PositionBucket> buckets{PositionBucket::kFirst, PositionBucket::kMiddle, PositionBucket::kLast};
    int items_per_cell = 20;
    double threshold = 0.9;
    int perplexity_items = 16;
    /// Length at which the ladder and heterogeneity reports are taken.
    int report_length = 512;
};

struct SimulateConfig {
    int prompt_length = 512;
    int prompts = 4;
    int decode_steps = 64;
};

struct PipelineConfig {
    ModelConfig model;
    DatasetSpec data;
    std::vector<TrainPhase> train;
    TrainConfig optimizer;  // Adam settings shared by every phase; steps/batch/lr come from the phase
    CalibrationSpec calibration;
    int grid_reference_length = 512;
    std::vector<int> profile_lengths{128, 256, 512};
    std::vector<int> constraint_lengths{128, 256, 512};
    std::vector<double> budgets{0.5};
    int validation_length = 768;
    int validation_items = 16;
    MaskGeometry geometry;
    int layer_rule_limit = 2;
    int pareto_intervals = 5;
    bool grow_spans = false;
    EvalConfig eval;
    SimulateConfig simulate;
    std::uint64_t seed = 1;
    std::string out = "moa_out";

    /// Throws InputError (e.g. validation length among the profile lengths).
    void validate() const;
};

PipelineConfig default_pipeline_config();
nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
/// Missing fields keep their defaults.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::string& path);

const std::vector<std::string>& stage_names();

struct StageResult {
    std::string stage;
    bool cached = false;
    double seconds = 0.0;
};

using StageLog = std::function<void(const std::string&)>;

/// Runs one stage ("all" runs every stage in order).
std::vector<StageResult> run_stage(const std::string& stage, const PipelineConfig& config, const StageLog& log = {});

/// Fixed artifact names.
std::string influence_file(int length);
std::string front_file(const PipelineConfig& c, double budget);
std::string plan_file(const PipelineConfig& c, double budget);

}  // namespace moa
