// SPDX-License-Identifier: Apache-2.0

#include "moa/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "moa/eval_harness.hpp"
#include "moa/influence.hpp"
#include "moa/kv_cache.hpp"
#include "moa/plan_optimizer.hpp"

namespace fs = std::filesystem;

namespace moa {

// ---- configuration -------------------------------------------------------

void PipelineConfig::validate() const {
    model.validate();
    if (train.empty()) throw InputError("config: train needs at least one phase");
    for (const auto& p : train) {
        if (p.length < 8 || p.steps < 0 || p.batch_size < 1 || p.corpus_size < 1) {
            throw InputError("config: bad train phase");
        }
        if (p.mix.mix_ratio < 0.0 || p.mix.mix_ratio > 1.0 || p.mix.copy_ratio < 0.0 || p.mix.copy_ratio > 1.0) {
            throw InputError("config: train mix ratios must lie in [0, 1]");
        }
    }
    if (profile_lengths.empty()) throw InputError("config: profile_lengths is empty");
    for (int n : profile_lengths) {
        if (n == validation_length) {
            throw InputError("config: validation length " + std::to_string(n) + " must not be a profile length");
        }
    }
    for (int n : constraint_lengths) {
        if (std::find(profile_lengths.begin(), profile_lengths.end(), n) == profile_lengths.end()) {
            throw InputError("config: constraint length " + std::to_string(n) + " is not profiled");
        }
    }
    if (budgets.empty()) throw InputError("config: no density budget");
    for (double b : budgets) {
        if (!(b > 0.0 && b <= 1.0)) throw InputError("config: budgets must lie in (0, 1]");
    }
    if (geometry.block_size < 1 || geometry.sink_blocks < 0) throw InputError("config: bad block geometry");
    if (layer_rule_limit < 1 || pareto_intervals < 1) throw InputError("config: bad optimizer settings");
    if (validation_items < 1 || calibration.items_per_level < 1) throw InputError("config: empty calibration");
    if (out.empty()) throw InputError("config: output directory is empty");
}

PipelineConfig default_pipeline_config() {
    PipelineConfig c;
    c.model.max_context = 1024;
    // short sequences first, then a shorter phase at 256 for length generalization
    TrainPhase longer;
    longer.length = 256;
    longer.steps = 600;
    longer.learning_rate = 1e-3;
    longer.corpus_size = 4000;
    c.train = {TrainPhase{}, longer};
    c.optimizer.warmup_steps = 20;
    c.calibration.levels = c.profile_lengths;
    return c;
}

namespace {

nlohmann::json phase_to_json(const TrainPhase& p) {
    return {{"length", p.length},         {"steps", p.steps},
            {"batch_size", p.batch_size}, {"learning_rate", p.learning_rate},
            {"corpus_size", p.corpus_size}, {"mix_ratio", p.mix.mix_ratio},
            {"copy_ratio", p.mix.copy_ratio}, {"answer_only", p.mix.answer_only},
            {"queries", p.mix.queries}};
}

TrainPhase phase_from_json(const nlohmann::json& j) {
    TrainPhase p;
    p.length = j.value("length", p.length);
    p.steps = j.value("steps", p.steps);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.learning_rate = j.value("learning_rate", p.learning_rate);
    p.corpus_size = j.value("corpus_size", p.corpus_size);
    p.mix.mix_ratio = j.value("mix_ratio", p.mix.mix_ratio);
    p.mix.copy_ratio = j.value("copy_ratio", p.mix.copy_ratio);
    p.mix.answer_only = j.value("answer_only", p.mix.answer_only);
    p.mix.queries = j.value("queries", p.mix.queries);
    return p;
}

nlohmann::json calibration_to_json(const CalibrationSpec& s) {
    return {{"mode", mode_name(s.mode)},
            {"items_per_level", s.items_per_level},
            {"supervision_length", s.supervision_length},
            {"longdep_context", s.longdep_context},
            {"seed", s.seed}};
}

CalibrationSpec calibration_from_json(const nlohmann::json& j, CalibrationSpec s) {
    if (j.contains("mode")) s.mode = mode_from_name(j.at("mode").get<std::string>());
    s.items_per_level = j.value("items_per_level", s.items_per_level);
    s.supervision_length = j.value("supervision_length", s.supervision_length);
    s.longdep_context = j.value("longdep_context", s.longdep_context);
    s.seed = j.value("seed", s.seed);
    return s;
}

PositionBucket bucket_from_name(const std::string& s) {
    if (s == "first") return PositionBucket::kFirst;
    if (s == "middle") return PositionBucket::kMiddle;
    if (s == "last") return PositionBucket::kLast;
    if (s == "any") return PositionBucket::kAny;
    throw InputError("unknown position bucket '" + s + "'");
}

}  // namespace

nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
    nlohmann::json phases = nlohmann::json::array();
    for (const auto& p : c.train) phases.push_back(phase_to_json(p));
    std::vector<std::string> buckets;
    for (auto b : c.eval.buckets) buckets.push_back(bucket_name(b));
    return {{"model", config_to_json(c.model)},
            {"data", dataset_spec_to_json(c.data)},
            {"train", phases},
            {"optimizer", train_config_to_json(c.optimizer)},
            {"calibration", calibration_to_json(c.calibration)},
            {"grid_reference_length", c.grid_reference_length},
            {"profile_lengths", c.profile_lengths},
            {"constraint_lengths", c.constraint_lengths},
            {"budgets", c.budgets},
            {"validation_length", c.validation_length},
            {"validation_items", c.validation_items},
            {"block_size", c.geometry.block_size},
            {"sink_blocks", c.geometry.sink_blocks},
            {"layer_rule_limit", c.layer_rule_limit},
            {"pareto_intervals", c.pareto_intervals},
            {"grow_spans", c.grow_spans},
            {"eval",
             {{"lengths", c.eval.lengths},
              {"buckets", buckets},
              {"items_per_cell", c.eval.items_per_cell},
              {"threshold", c.eval.threshold},
              {"perplexity_items", c.eval.perplexity_items},
              {"report_length", c.eval.report_length}}},
            {"simulate",
             {{"prompt_length", c.simulate.prompt_length},
              {"prompts", c.simulate.prompts},
              {"decode_steps", c.simulate.decode_steps}}},
            {"seed", c.seed},
            {"out", c.out}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig c = default_pipeline_config();
    try {
        if (j.contains("model")) c.model = config_from_json(j.at("model"));
        if (j.contains("data")) c.data = dataset_spec_from_json(j.at("data"));
        if (j.contains("train")) {
            c.train.clear();
            for (const auto& p : j.at("train")) c.train.push_back(phase_from_json(p));
        }
        if (j.contains("optimizer")) c.optimizer = train_config_from_json(j.at("optimizer"));
        if (j.contains("calibration")) c.calibration = calibration_from_json(j.at("calibration"), c.calibration);
        c.grid_reference_length = j.value("grid_reference_length", c.grid_reference_length);
        c.profile_lengths = j.value("profile_lengths", c.profile_lengths);
        c.constraint_lengths = j.value("constraint_lengths", c.constraint_lengths);
        c.budgets = j.value("budgets", c.budgets);
        c.validation_length = j.value("validation_length", c.validation_length);
        c.validation_items = j.value("validation_items", c.validation_items);
        c.geometry.block_size = j.value("block_size", c.geometry.block_size);
        c.geometry.sink_blocks = j.value("sink_blocks", c.geometry.sink_blocks);
        c.layer_rule_limit = j.value("layer_rule_limit", c.layer_rule_limit);
        c.pareto_intervals = j.value("pareto_intervals", c.pareto_intervals);
        c.grow_spans = j.value("grow_spans", c.grow_spans);
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            c.eval.lengths = e.value("lengths", c.eval.lengths);
            if (e.contains("buckets")) {
                c.eval.buckets.clear();
                for (const auto& b : e.at("buckets")) c.eval.buckets.push_back(bucket_from_name(b.get<std::string>()));
            }
            c.eval.items_per_cell = e.value("items_per_cell", c.eval.items_per_cell);
            c.eval.threshold = e.value("threshold", c.eval.threshold);
            c.eval.perplexity_items = e.value("perplexity_items", c.eval.perplexity_items);
            c.eval.report_length = e.value("report_length", c.eval.report_length);
        }
        if (j.contains("simulate")) {
            const auto& s = j.at("simulate");
            c.simulate.prompt_length = s.value("prompt_length", c.simulate.prompt_length);
            c.simulate.prompts = s.value("prompts", c.simulate.prompts);
            c.simulate.decode_steps = s.value("decode_steps", c.simulate.decode_steps);
        }
        c.seed = j.value("seed", c.seed);
        c.out = j.value("out", c.out);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("config: ") + e.what());
    }
    c.calibration.levels = c.profile_lengths;
    return c;
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config " + path + ": " + e.what());
    }
    return pipeline_config_from_json(j);
}

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"gen",      "train",    "calibrate", "profile",
                                                "optimize", "validate", "evaluate",  "simulate"};
    return names;
}

std::string influence_file(int length) { return "influence_" + std::to_string(length) + ".bin"; }

namespace {

std::string budget_tag(double b) {
    std::ostringstream s;
    s << b;
    return s.str();
}

}  // namespace

std::string front_file(const PipelineConfig& c, double budget) {
    return budget == c.budgets.front() ? "front.json" : "front_" + budget_tag(budget) + ".json";
}

std::string plan_file(const PipelineConfig& c, double budget) {
    return budget == c.budgets.front() ? "plan.json" : "plan_" + budget_tag(budget) + ".json";
}

// ---- manifest ------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

struct StageContext {
    const PipelineConfig& config;
    fs::path dir;
    StageLog log;

    std::string path(const std::string& name) const { return (dir / name).string(); }
    void say(const std::string& s) const {
        if (log) log(s);
    }
};

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path);
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    out << j.dump(2) << '\n';
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    out << text;
}

/// Sections of the config each stage depends on; a change re-runs that stage.
nlohmann::json stage_config(const std::string& stage, const nlohmann::json& full) {
    static const std::map<std::string, std::vector<std::string>> keys{
        {"gen", {"data", "train", "seed"}},
        {"train", {"model", "optimizer", "train", "seed"}},
        {"calibrate", {"data", "calibration", "profile_lengths", "validation_length", "validation_items"}},
        {"profile", {"profile_lengths", "block_size"}},
        {"optimize",
         {"grid_reference_length", "constraint_lengths", "budgets", "block_size", "sink_blocks", "layer_rule_limit",
          "pareto_intervals"}},
        {"validate", {"budgets", "validation_length"}},
        {"evaluate", {"data", "eval", "budgets", "block_size", "sink_blocks", "grow_spans", "seed"}},
        {"simulate", {"data", "simulate", "grow_spans", "seed"}},
    };
    nlohmann::json sub = nlohmann::json::object();
    for (const auto& k : keys.at(stage)) sub[k] = full.at(k);
    return sub;
}

class Manifest {
public:
    explicit Manifest(std::string path) : path_(std::move(path)) {
        if (fs::exists(path_)) data_ = read_json_file(path_);
        if (!data_.is_object()) data_ = nlohmann::json::object();
        if (!data_.contains("stages")) data_["stages"] = nlohmann::json::object();
    }

    const nlohmann::json* stage(const std::string& name) const {
        const auto& s = data_.at("stages");
        return s.contains(name) ? &s.at(name) : nullptr;
    }

    /// Stage that last wrote `file`, or "".
    std::string producer(const std::string& file) const {
        for (const auto& [name, entry] : data_.at("stages").items()) {
            if (entry.at("outputs").contains(file)) return name;
        }
        return "";
    }

    void record(const std::string& name, nlohmann::json entry) {
        data_["stages"][name] = std::move(entry);
        write_json_file(path_, data_);
    }

private:
    std::string path_;
    nlohmann::json data_;
};

/// Upstream files are checked against the hash their producer recorded.
std::map<std::string, std::string> check_inputs(const StageContext& ctx, const Manifest& manifest,
                                                const std::string& stage, const std::vector<std::string>& inputs,
                                                const std::map<std::string, std::string>& producers) {
    std::map<std::string, std::string> hashes;
    for (const auto& name : inputs) {
        const std::string expected_stage = producers.at(name);
        const std::string p = ctx.path(name);
        if (!fs::exists(p)) {
            throw DependencyError(stage + ": missing " + name + "; run stage '" + expected_stage + "' first",
                                  expected_stage);
        }
        const std::string h = sha256_file(p);
        const nlohmann::json* up = manifest.stage(expected_stage);
        if (!up || !up->at("outputs").contains(name)) {
            throw DependencyError(stage + ": " + name + " has no manifest record; re-run stage '" + expected_stage + "'",
                                  expected_stage);
        }
        if (up->at("outputs").at(name).get<std::string>() != h) {
            throw DependencyError(stage + ": hash mismatch for " + name + " (modified after stage '" + expected_stage +
                                      "' wrote it); re-run '" + expected_stage + "'",
                                  expected_stage);
        }
        hashes[name] = h;
    }
    return hashes;
}

// ---- stage bodies --------------------------------------------------------

std::string corpus_file(std::size_t phase) { return "corpus_" + std::to_string(phase) + ".jsonl"; }

void save_corpus(const std::vector<TrainingSequence>& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    for (const auto& s : corpus) {
        std::string mask(s.supervision.size(), '0');
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = s.supervision[i] ? '1' : '0';
        out << nlohmann::json{{"tokens", s.tokens}, {"supervision", mask}}.dump() << '\n';
    }
}

std::vector<TrainingSequence> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path);
    std::vector<TrainingSequence> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        TrainingSequence s;
        s.tokens = j.at("tokens").get<std::vector<int>>();
        for (char ch : j.at("supervision").get<std::string>()) s.supervision.push_back(ch == '1');
        if (s.supervision.size() != s.tokens.size()) throw InputError(path + ": mask/token length differ");
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<std::string> stage_gen(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    std::vector<std::string> outs;
    for (std::size_t p = 0; p < c.train.size(); ++p) {
        const TrainPhase& ph = c.train[p];
        auto corpus = gen_pretrain_corpus(c.data, ph.corpus_size, ph.mix, mix_seed(c.seed, 100 + p), ph.length);
        save_corpus(corpus, ctx.path(corpus_file(p)));
        outs.push_back(corpus_file(p));
    }
    return outs;
}

std::vector<std::string> stage_train(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    ModelConfig mc = c.model;
    mc.seed = mix_seed(c.seed, 1);
    Model model = init_model(mc);
    nlohmann::json curves = nlohmann::json::array();
    for (std::size_t p = 0; p < c.train.size(); ++p) {
        const TrainPhase& ph = c.train[p];
        const auto corpus = load_corpus(ctx.path(corpus_file(p)));
        TrainConfig tc = c.optimizer;
        tc.steps = ph.steps;
        tc.batch_size = ph.batch_size;
        tc.learning_rate = ph.learning_rate;
        tc.seed = mix_seed(c.seed, 200 + p);
        tc.threads = default_thread_count();
        const TrainResult r = train(model, corpus, tc, [&](int step, double loss) {
            if (step % 250 == 0) {
                std::ostringstream s;
                s << "train phase " << p << " step " << step << " loss " << loss;
                ctx.say(s.str());
            }
        });
        curves.push_back(r.loss_curve);
    }
    save_checkpoint(model, ctx.path("model.ckpt"));
    write_json_file(ctx.path("train_log.json"), {{"loss_curves", curves}, {"fingerprint", model_fingerprint(model)}});
    return {"model.ckpt", "train_log.json"};
}

std::vector<std::string> stage_calibrate(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    const Model model = load_checkpoint(ctx.path("model.ckpt"));
    CalibrationSpec spec = c.calibration;
    spec.levels = c.profile_lengths;
    CalibrationSet set = build_calibration(model, c.data, spec);
    if (set.skipped > 0) ctx.say("calibration skipped " + std::to_string(set.skipped) + " items");
    save_jsonl(set.items, ctx.path("calibration.jsonl"));

    CalibrationSpec vspec = spec;
    vspec.levels = {c.validation_length};
    vspec.items_per_level = c.validation_items;
    vspec.seed = mix_seed(spec.seed, 77);
    CalibrationSet val = build_calibration(model, c.data, vspec);
    save_jsonl(val.items, ctx.path("validation.jsonl"));
    return {"calibration.jsonl", "validation.jsonl"};
}

std::vector<std::string> stage_profile(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    const Model model = load_checkpoint(ctx.path("model.ckpt"));
    const auto items = load_jsonl(ctx.path("calibration.jsonl"));
    const auto tensors = profile(model, items, c.profile_lengths, c.geometry.block_size, default_thread_count());
    std::vector<std::string> outs;
    for (const auto& t : tensors) {
        save_influence(t, ctx.path(influence_file(t.length_level)));
        outs.push_back(influence_file(t.length_level));
    }
    // SoE over the longest level's contexts
    const int longest = *std::max_element(c.profile_lengths.begin(), c.profile_lengths.end());
    std::vector<std::vector<int>> sentences;
    for (const auto& it : items) {
        if (it.level == longest) sentences.push_back(it.tokens);
    }
    nlohmann::json soe_json = nlohmann::json::array();
    if (sentences.size() >= 2) soe_json = soe(model, sentences, default_thread_count());
    write_json_file(ctx.path("soe.json"), {{"length", longest}, {"soe", soe_json}});
    outs.push_back("soe.json");
    return outs;
}

OptimizationInstance make_instance(const PipelineConfig& c, const RuleLossTable& table, double budget) {
    OptimizationInstance inst;
    inst.table = table;
    for (int n : c.constraint_lengths) inst.density_constraints.push_back({n, budget});
    inst.layer_rule_limit = c.layer_rule_limit;
    return inst;
}

std::vector<std::string> stage_optimize(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    std::vector<InfluenceTensor> tensors;
    for (int n : c.profile_lengths) tensors.push_back(load_influence(ctx.path(influence_file(n))));
    const RuleLossTable table = rule_loss_table(tensors, RuleGrid::scaled_default(c.grid_reference_length).rules(),
                                                c.geometry, c.model.n_heads_per_layer);
    write_json_file(ctx.path("rule_table.json"), rule_table_to_json(table));
    const std::string fp = read_json_file(ctx.path("train_log.json")).at("fingerprint");
    std::vector<std::string> outs{"rule_table.json"};
    for (double b : c.budgets) {
        const OptimizationInstance inst = make_instance(c, table, b);
        const ParetoSet front = pareto_front(inst, c.pareto_intervals, default_thread_count());
        std::ostringstream s;
        s << "budget " << b << ": front of " << front.members.size() << " plans from " << front.stats.subproblems
          << " sub-problems (" << front.stats.infeasible << " infeasible), " << front.stats.nodes << " nodes, "
          << front.stats.seconds << " s";
        ctx.say(s.str());
        write_json_file(ctx.path(front_file(c, b)), front_to_json(inst, front, fp));
        outs.push_back(front_file(c, b));
    }
    return outs;
}

std::vector<MoAPlan> read_front_plans(const std::string& path) {
    std::vector<MoAPlan> plans;
    for (const auto& m : read_json_file(path)) plans.push_back(plan_from_json(m.at("plan")));
    if (plans.empty()) throw InputError(path + ": empty front");
    return plans;
}

std::vector<std::string> stage_validate(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    const Model model = load_checkpoint(ctx.path("model.ckpt"));
    const auto items = load_jsonl(ctx.path("validation.jsonl"));
    std::vector<std::string> outs;
    nlohmann::json summary = nlohmann::json::array();
    for (double b : c.budgets) {
        const auto plans = read_front_plans(ctx.path(front_file(c, b)));
        const ValidationChoice choice =
            select_by_validation(plans, model, items, c.validation_length, default_thread_count());
        save_plan(plans[choice.index], ctx.path(plan_file(c, b)));
        outs.push_back(plan_file(c, b));
        summary.push_back({{"budget", b}, {"chosen", choice.index}, {"validation_losses", choice.losses}});
    }
    write_json_file(ctx.path("validation_report.json"), summary);
    outs.push_back("validation_report.json");
    return outs;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0 + 1.0;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return (da == 0.0 || db == 0.0) ? 0.0 : num / std::sqrt(da * db);
}

std::vector<std::string> stage_evaluate(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    const Model model = load_checkpoint(ctx.path("model.ckpt"));
    const double budget = c.budgets.front();
    const MoAPlan plan = load_plan(ctx.path(plan_file(c, budget)));
    const RuleLossTable table = rule_table_from_json(read_json_file(ctx.path("rule_table.json")));

    RetrievalSetup setup;
    setup.data = c.data;
    setup.geometry = c.geometry;
    setup.seed = mix_seed(c.seed, 300);
    setup.grow_spans = c.grow_spans;
    setup.threads = default_thread_count();
    CompareSetup cs;
    cs.lengths = c.eval.lengths;
    cs.buckets = c.eval.buckets;
    cs.items_per_cell = c.eval.items_per_cell;
    cs.threshold = c.eval.threshold;
    cs.density_check_lengths = c.constraint_lengths;

    CalibrationSpec pspec = c.calibration;
    pspec.mode = CalibrationMode::kHumanLongDep;
    pspec.levels = {c.eval.report_length};
    pspec.items_per_level = c.eval.perplexity_items;
    pspec.seed = mix_seed(c.seed, 301);
    const auto ppl_items = build_calibration(model, c.data, pspec).items;

    nlohmann::json summary;
    std::vector<std::string> outs;
    try {
        const ComparisonReport report = compare_uniform(model, plan, budget, cs, setup, ppl_items);
        write_json_file(ctx.path("report_compare.json"), comparison_to_json(report));
        write_text_file(ctx.path("report_accuracy.csv"), comparison_to_csv(report));
        outs.push_back("report_compare.json");
        outs.push_back("report_accuracy.csv");
        for (const auto& m : report.methods) {
            summary["methods"][m.name] = {{"effective_context_length", m.effective_length},
                                          {"perplexity", m.ppl},
                                          {"curve", m.grid.curve()}};
        }
    } catch (const ComparabilityError& e) {
        // still report the searched plan, flagged
        summary["comparability_error"] = e.what();
        ctx.say(std::string("evaluate: ") + e.what());
        MethodReport dense, moa;
        for (const auto& [name, p] : std::vector<std::pair<std::string, const MoAPlan*>>{{"dense", nullptr}, {"moa", &plan}}) {
            const AccuracyGrid g = accuracy_grid(model, p, cs.lengths, cs.buckets, cs.items_per_cell, setup);
            summary["methods"][name] = {{"effective_context_length", effective_context_length(g.curve(), cs.threshold)},
                                        {"curve", g.curve()}};
        }
    }

    // heterogeneity ladder on the shared rule table
    std::ostringstream ladder;
    ladder << "step,status,loss,density_" << c.eval.report_length << "\n";
    OptimizationInstance inst = make_instance(c, table, budget);
    const int objective = *std::max_element(table.lengths.begin(), table.lengths.end());
    for (LadderStep step :
         {LadderStep::kUniform, LadderStep::kHeteroLayers, LadderStep::kHeteroHeads, LadderStep::kElastic}) {
        try {
            const Solution s = solve_ladder_step(inst, step, objective);
            const MoAPlan p = solution_plan(inst, s, plan.fingerprint);
            ladder << ladder_name(step) << ",ok," << s.losses[table.length_index(objective)] << ','
                   << plan_density(p, c.eval.report_length) << "\n";
        } catch (const InfeasibleError& e) {
            ladder << ladder_name(step) << ",infeasible,,\n";
        }
    }
    write_text_file(ctx.path("report_ladder.csv"), ladder.str());
    outs.push_back("report_ladder.csv");

    // per-head density and SoE
    const nlohmann::json soe_json = read_json_file(ctx.path("soe.json"));
    std::vector<double> soe_v = soe_json.at("soe").get<std::vector<double>>();
    std::vector<double> dens;
    std::ostringstream heads;
    heads << "head,layer,alpha,beta,density_" << c.eval.report_length << ",soe\n";
    int h = 0;
    for (std::size_t l = 0; l < plan.layers.size(); ++l) {
        for (const auto& r : plan.layers[l]) {
            const double d = density_of(r, c.eval.report_length, plan.geometry);
            dens.push_back(d);
            heads << h << ',' << l << ',' << r.alpha << ',' << r.beta << ',' << d << ','
                  << (h < static_cast<int>(soe_v.size()) ? soe_v[h] : 0.0) << "\n";
            ++h;
        }
    }
    write_text_file(ctx.path("report_heads.csv"), heads.str());
    outs.push_back("report_heads.csv");
    const auto [mn, mx] = std::minmax_element(dens.begin(), dens.end());
    summary["density_spread"] = *mx - *mn;
    summary["soe_density_spearman"] = soe_v.size() == dens.size() ? spearman(soe_v, dens) : 0.0;
    summary["budget"] = budget;
    summary["plan_density"] = plan_density(plan, c.eval.report_length);
    write_json_file(ctx.path("report_summary.json"), summary);
    outs.push_back("report_summary.json");
    return outs;
}

std::vector<std::string> stage_simulate(const StageContext& ctx) {
    const PipelineConfig& c = ctx.config;
    const Model model = load_checkpoint(ctx.path("model.ckpt"));
    const MoAPlan plan = load_plan(ctx.path(plan_file(c, c.budgets.front())));
    nlohmann::json runs = nlohmann::json::array();
    std::string csv;
    for (int i = 0; i < c.simulate.prompts; ++i) {
        const RetrievalInstance inst =
            gen_retrieval_instance(c.data, default_pair_count(c.simulate.prompt_length), PositionBucket::kAny,
                                   mix_seed(c.seed, 400 + i), c.simulate.prompt_length);
        PrefillResult pre = prefill(model, inst.prompt, plan, c.grow_spans);
        std::vector<int> tokens = inst.prompt;
        MatrixXd logits = pre.logits;
        double max_diff = 0.0;
        for (int s = 0; s < c.simulate.decode_steps; ++s) {
            Eigen::Index next;
            logits.row(0).maxCoeff(&next);
            tokens.push_back(static_cast<int>(next));
            logits = decode_step(model, pre.cache, static_cast<int>(next));
            if (s % 8 == 7 || s + 1 == c.simulate.decode_steps) {
                const HeadMasks ref = decode_reference_masks(model.config, plan, tokens,
                                                             static_cast<int>(inst.prompt.size()), c.grow_spans);
                const MatrixXd full = forward_logits(model, tokens, ref);
                max_diff = std::max(max_diff, (full.bottomRows(1) - logits).cwiseAbs().maxCoeff());
            }
        }
        const CostReport cost = cost_report(pre.cache);
        nlohmann::json j = cost_report_to_json(cost);
        j["max_abs_logit_diff"] = max_diff;
        runs.push_back(j);
        if (i == 0) csv = cost_report_to_csv(cost);
    }
    write_json_file(ctx.path("cost.json"), runs);
    write_text_file(ctx.path("report_cost.csv"), csv);
    return {"cost.json", "report_cost.csv"};
}

struct StageSpec {
    std::vector<std::string> inputs;
    std::function<std::vector<std::string>(const StageContext&)> body;
};

std::map<std::string, std::string> producers_for(const PipelineConfig& c) {
    std::map<std::string, std::string> p;
    for (std::size_t i = 0; i < c.train.size(); ++i) p[corpus_file(i)] = "gen";
    p["model.ckpt"] = "train";
    p["train_log.json"] = "train";
    p["calibration.jsonl"] = "calibrate";
    p["validation.jsonl"] = "calibrate";
    for (int n : c.profile_lengths) p[influence_file(n)] = "profile";
    p["soe.json"] = "profile";
    p["rule_table.json"] = "optimize";
    for (double b : c.budgets) {
        p[front_file(c, b)] = "optimize";
        p[plan_file(c, b)] = "validate";
    }
    return p;
}

StageSpec spec_for(const std::string& stage, const PipelineConfig& c) {
    if (stage == "gen") return {{}, stage_gen};
    if (stage == "train") {
        std::vector<std::string> in;
        for (std::size_t i = 0; i < c.train.size(); ++i) in.push_back(corpus_file(i));
        return {in, stage_train};
    }
    if (stage == "calibrate") return {{"model.ckpt"}, stage_calibrate};
    if (stage == "profile") return {{"model.ckpt", "calibration.jsonl"}, stage_profile};
    if (stage == "optimize") {
        std::vector<std::string> in{"train_log.json"};
        for (int n : c.profile_lengths) in.push_back(influence_file(n));
        return {in, stage_optimize};
    }
    if (stage == "validate") {
        std::vector<std::string> in{"model.ckpt", "validation.jsonl"};
        for (double b : c.budgets) in.push_back(front_file(c, b));
        return {in, stage_validate};
    }
    if (stage == "evaluate") {
        return {{"model.ckpt", plan_file(c, c.budgets.front()), "rule_table.json", "soe.json"}, stage_evaluate};
    }
    if (stage == "simulate") return {{"model.ckpt", plan_file(c, c.budgets.front())}, stage_simulate};
    throw InputError("unknown stage '" + stage + "'");
}

StageResult run_one(const std::string& stage, const PipelineConfig& config, const StageLog& log) {
    StageContext ctx{config, fs::path(config.out), log};
    fs::create_directories(ctx.dir);
    Manifest manifest(ctx.path("manifest.json"));
    const StageSpec spec = spec_for(stage, config);
    const auto inputs = check_inputs(ctx, manifest, stage, spec.inputs, producers_for(config));
    const std::string config_hash = sha256_hex(stage_config(stage, pipeline_config_to_json(config)).dump());

    if (const nlohmann::json* prev = manifest.stage(stage)) {
        bool hit = prev->at("config_hash") == config_hash && prev->at("inputs") == nlohmann::json(inputs);
        for (const auto& [name, h] : prev->at("outputs").items()) {
            if (!hit) break;
            hit = fs::exists(ctx.path(name)) && sha256_file(ctx.path(name)) == h.get<std::string>();
        }
        if (hit) {
            ctx.say(stage + ": cached");
            return {stage, true, 0.0};
        }
    }

    ctx.say(stage + ": running");
    const auto t0 = Clock::now();
    const std::vector<std::string> outputs = spec.body(ctx);
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    nlohmann::json out_hashes = nlohmann::json::object();
    for (const auto& name : outputs) out_hashes[name] = sha256_file(ctx.path(name));
    manifest.record(stage, {{"config_hash", config_hash},
                            {"inputs", inputs},
                            {"outputs", out_hashes},
                            {"duration_seconds", seconds}});
    std::ostringstream s;
    s << stage << ": done in " << std::fixed << std::setprecision(1) << seconds << " s";
    ctx.say(s.str());
    return {stage, false, seconds};
}

}  // namespace

std::vector<StageResult> run_stage(const std::string& stage, const PipelineConfig& config, const StageLog& log) {
    config.validate();
    std::vector<StageResult> results;
    if (stage == "all") {
        for (const auto& s : stage_names()) results.push_back(run_one(s, config, log));
        return results;
    }
    if (std::find(stage_names().begin(), stage_names().end(), stage) == stage_names().end()) {
        throw InputError("unknown stage '" + stage + "'");
    }
    results.push_back(run_one(stage, config, log));
    return results;
}

}  // namespace moa
