// SPDX-License-Identifier: Apache-2.0

#include "moa/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "moa/util.hpp"

namespace moa {

FillerGrammar FillerGrammar::make(const Vocabulary& vocab, std::uint64_t grammar_seed, double noise) {
    const int f = vocab.filler_count;
    Rng rng(mix_seed(grammar_seed, 0x67726d));
    std::vector<int> rows(f), cols(f);
    for (int i = 0; i < f; ++i) rows[i] = cols[i] = i;
    rng.shuffle(rows);
    rng.shuffle(cols);
    FillerGrammar g;
    g.noise = noise;
    g.latin.assign(f, std::vector<int>(f));
    for (int a = 0; a < f; ++a) {
        for (int b = 0; b < f; ++b) g.latin[a][b] = (rows[a] + cols[b]) % f;
    }
    return g;
}

nlohmann::json dataset_spec_to_json(const DatasetSpec& s) {
    return {{"grammar_seed", s.grammar_seed}, {"filler_noise", s.filler_noise}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
    DatasetSpec s;
    s.grammar_seed = j.value("grammar_seed", s.grammar_seed);
    s.filler_noise = j.value("filler_noise", s.filler_noise);
    return s;
}

std::string bucket_name(PositionBucket b) {
    switch (b) {
        case PositionBucket::kFirst: return "first";
        case PositionBucket::kMiddle: return "middle";
        case PositionBucket::kLast: return "last";
        case PositionBucket::kAny: break;
    }
    return "any";
}

int default_pair_count(int length) { return std::clamp(length / 32, 2, 16); }

namespace {

/// Continues filler text after `out`'s last two symbols (or seeds them).
void append_filler(std::vector<int>& out, int count, const Vocabulary& v, const FillerGrammar& g, Rng& rng) {
    for (int i = 0; i < count; ++i) {
        const std::size_t n = out.size();
        const bool have_ctx = n >= 2 && v.is_filler(out[n - 1]) && v.is_filler(out[n - 2]);
        int sym;
        if (!have_ctx || rng.uniform() < g.noise) {
            sym = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.filler_count)));
        } else {
            sym = g.latin[out[n - 2] - v.filler_begin][out[n - 1] - v.filler_begin];
        }
        out.push_back(v.filler_begin + sym);
    }
}

std::pair<int, int> bucket_range(PositionBucket b, int n_pairs) {
    const int edge = (n_pairs + 3) / 4;
    switch (b) {
        case PositionBucket::kFirst: return {0, edge};
        case PositionBucket::kLast: return {n_pairs - edge, n_pairs};
        case PositionBucket::kMiddle:
            if (n_pairs - 2 * edge <= 0) return {0, n_pairs};
            return {edge, n_pairs - edge};
        case PositionBucket::kAny: break;
    }
    return {0, n_pairs};
}

struct Body {
    std::vector<int> keys;
    std::vector<int> values;
    std::vector<int> key_positions;
};

/// Appends BOS-less body of exactly `body_len` tokens holding n_pairs pairs.
Body append_body(std::vector<int>& out, int n_pairs, int body_len, const Vocabulary& v, const FillerGrammar& g,
                 Rng& rng) {
    Body b;
    std::vector<int> keys(v.key_count);
    for (int i = 0; i < v.key_count; ++i) keys[i] = v.key_begin + i;
    rng.shuffle(keys);
    keys.resize(n_pairs);
    b.keys = keys;
    const int seg = body_len / n_pairs;
    int extra = body_len - seg * n_pairs;  // last segment absorbs the remainder
    for (int p = 0; p < n_pairs; ++p) {
        const int width = seg + (p == n_pairs - 1 ? extra : 0);
        const int offset = width > 3 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(width - 3 + 1))) : 0;
        append_filler(out, offset, v, g, rng);
        const int value = v.value_begin + static_cast<int>(rng.below(static_cast<std::uint64_t>(v.value_count)));
        out.push_back(v.sep);
        b.key_positions.push_back(static_cast<int>(out.size()));
        out.push_back(keys[p]);
        out.push_back(value);
        b.values.push_back(value);
        append_filler(out, width - offset - 3, v, g, rng);
    }
    return b;
}

}  // namespace

std::vector<int> gen_local_sequence(const DatasetSpec& spec, const FillerGrammar& grammar, int length, Rng& rng) {
    std::vector<int> out{spec.vocab.bos};
    append_filler(out, length - 1, spec.vocab, grammar, rng);
    return out;
}

RetrievalInstance gen_retrieval_instance(const DatasetSpec& spec, int n_pairs, PositionBucket bucket,
                                         std::uint64_t seed, int length) {
    const Vocabulary& v = spec.vocab;
    if (n_pairs < 1) throw InputError("retrieval instance needs at least one pair");
    if (n_pairs > v.key_count) {
        throw InputError("vocabulary exhausted: " + std::to_string(n_pairs) + " pairs but only " +
                         std::to_string(v.key_count) + " keys");
    }
    const int body_len = length == 0 ? 3 * n_pairs : length - 4;  // BOS, QUERY, key, answer
    if (body_len < 3 * n_pairs) {
        throw InputError("length " + std::to_string(length) + " cannot hold " + std::to_string(n_pairs) + " pairs");
    }
    Rng rng(mix_seed(seed, 0x72657472));
    const FillerGrammar g = spec.grammar();
    RetrievalInstance inst;
    inst.n_pairs = n_pairs;
    inst.bucket = bucket;
    inst.prompt.push_back(v.bos);
    const Body body = append_body(inst.prompt, n_pairs, body_len, v, g, rng);
    auto [lo, hi] = bucket_range(bucket, n_pairs);
    inst.queried_pair = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo)));
    inst.key_position = body.key_positions[inst.queried_pair];
    inst.value_position = inst.key_position + 1;
    inst.prompt.push_back(v.query);
    inst.prompt.push_back(body.keys[inst.queried_pair]);
    inst.answer = {body.values[inst.queried_pair]};
    return inst;
}

std::vector<TrainingSequence> gen_pretrain_corpus(const DatasetSpec& spec, int size, const CorpusMix& mix,
                                                  std::uint64_t seed, int length) {
    const Vocabulary& v = spec.vocab;
    const FillerGrammar g = spec.grammar();
    if (length < 16) throw InputError("pretrain corpus: length must be at least 16");
    std::vector<TrainingSequence> corpus;
    corpus.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        TrainingSequence s;
        const double u = rng.uniform();
        if (u < mix.copy_ratio) {
            // BOS x gap x filler..., x drawn from key and value symbols
            const int half = (length - 1) / 2;
            const int h = static_cast<int>(rng.range(6, half - 4));
            const int gap = static_cast<int>(rng.range(0, length - 1 - 2 * h));
            std::vector<int> x(static_cast<std::size_t>(h));
            for (int& t : x) t = v.key_begin + static_cast<int>(rng.below(v.key_count + v.value_count));
            s.tokens.push_back(v.bos);
            s.tokens.insert(s.tokens.end(), x.begin(), x.end());
            for (int k = 0; k < gap; ++k) s.tokens.push_back(v.filler_begin + static_cast<int>(rng.below(v.filler_count)));
            const std::size_t start = s.tokens.size();
            s.tokens.insert(s.tokens.end(), x.begin(), x.end());
            while (static_cast<int>(s.tokens.size()) < length) {
                s.tokens.push_back(v.filler_begin + static_cast<int>(rng.below(v.filler_count)));
            }
            s.supervision.assign(s.tokens.size(), !mix.answer_only);
            s.supervision[0] = false;
            if (mix.answer_only) {
                for (std::size_t t = start + 1; t < start + x.size(); ++t) s.supervision[t] = true;
            }
        } else if (rng.uniform() < mix.mix_ratio) {
            const int n_queries = mix.queries > 0 ? mix.queries : std::max(1, length / 8);
            const int body_len = length - 1 - 3 * n_queries;
            const int n_pairs = std::min({std::max(default_pair_count(length), length / 12), v.key_count, body_len / 3});
            s.tokens.push_back(v.bos);
            const Body body = append_body(s.tokens, n_pairs, body_len, v, g, rng);
            std::vector<int> order(n_pairs);
            for (int p = 0; p < n_pairs; ++p) order[p] = p;
            rng.shuffle(order);
            for (int q = 0; q < n_queries; ++q) {
                const int p = order[static_cast<std::size_t>(q) % order.size()];
                s.tokens.push_back(v.query);
                s.tokens.push_back(body.keys[p]);
                s.tokens.push_back(body.values[p]);
            }
            s.supervision.assign(s.tokens.size(), !mix.answer_only);
            s.supervision[0] = false;
            if (mix.answer_only) {
                for (std::size_t t = 2; t < s.tokens.size(); ++t) s.supervision[t] = s.tokens[t - 2] == v.query;
            }
        } else {
            s.tokens = gen_local_sequence(spec, g, length, rng);
            s.supervision.assign(s.tokens.size(), true);
            s.supervision[0] = false;
        }
        corpus.push_back(std::move(s));
    }
    return corpus;
}

std::string mode_name(CalibrationMode m) {
    switch (m) {
        case CalibrationMode::kAlignedLongDep: return "aligned-longdep";
        case CalibrationMode::kHumanLongDep: return "human-longdep";
        case CalibrationMode::kGenericLocal: return "generic-local";
    }
    return "?";
}

CalibrationMode mode_from_name(const std::string& s) {
    if (s == "aligned-longdep") return CalibrationMode::kAlignedLongDep;
    if (s == "human-longdep") return CalibrationMode::kHumanLongDep;
    if (s == "generic-local") return CalibrationMode::kGenericLocal;
    throw InputError("unknown calibration mode '" + s + "'");
}

namespace {

CalibrationItem answer_only_item(std::vector<int> context, const std::vector<int>& supervision, int level,
                                 const Vocabulary& v) {
    CalibrationItem item;
    item.level = level;
    item.tokens = std::move(context);
    const std::size_t ctx_len = item.tokens.size();
    item.tokens.insert(item.tokens.end(), supervision.begin(), supervision.end());
    item.supervision.assign(item.tokens.size(), false);
    for (std::size_t i = ctx_len; i < item.tokens.size(); ++i) item.supervision[i] = true;
    item.tokens.resize(static_cast<std::size_t>(level), v.pad);
    item.supervision.resize(static_cast<std::size_t>(level), false);
    return item;
}

}  // namespace

CalibrationSet build_calibration(const Model& model, const DatasetSpec& data, const CalibrationSpec& spec) {
    const Vocabulary& v = data.vocab;
    CalibrationSet out;
    for (int level : spec.levels) {
        for (int i = 0; i < spec.items_per_level; ++i) {
            const std::uint64_t item_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(level) * 100003u + i);
            const int n_pairs = std::min(default_pair_count(level), v.key_count);
            nlohmann::json meta{{"mode", mode_name(spec.mode)}, {"index", i}};
            if (spec.mode == CalibrationMode::kGenericLocal) {
                CalibrationItem item;
                item.level = level;
                if (spec.longdep_context) {
                    RetrievalInstance inst =
                        gen_retrieval_instance(data, n_pairs, PositionBucket::kAny, item_seed, level);
                    item.tokens = inst.prompt;
                    item.tokens.insert(item.tokens.end(), inst.answer.begin(), inst.answer.end());
                    meta["queried_pair"] = inst.queried_pair;
                } else {
                    Rng rng(item_seed);
                    item.tokens = gen_local_sequence(data, data.grammar(), level, rng);
                }
                item.supervision.assign(item.tokens.size(), true);
                item.supervision[0] = false;
                item.meta = std::move(meta);
                out.items.push_back(std::move(item));
                continue;
            }
            // The prompt leaves room for the supervision tokens inside the level.
            const int sup_len = spec.supervision_length;
            RetrievalInstance inst =
                gen_retrieval_instance(data, n_pairs, PositionBucket::kAny, item_seed, level - sup_len + 1);
            meta["queried_pair"] = inst.queried_pair;
            meta["answer"] = inst.answer;
            std::vector<int> supervision;
            if (spec.mode == CalibrationMode::kHumanLongDep) {
                supervision = inst.answer;
                supervision.resize(static_cast<std::size_t>(sup_len), v.pad);
                while (!supervision.empty() && supervision.back() == v.pad) supervision.pop_back();
            } else {
                std::vector<int> gen = generate(model, inst.prompt, sup_len);
                for (int t : gen) {
                    if (t == v.pad) break;
                    supervision.push_back(t);
                }
            }
            if (supervision.empty()) {
                ++out.skipped;
                std::cerr << "calibration: item " << i << " at level " << level
                          << " produced an empty continuation; skipped\n";
                continue;
            }
            CalibrationItem item = answer_only_item(inst.prompt, supervision, level, v);
            item.meta = std::move(meta);
            out.items.push_back(std::move(item));
        }
    }
    return out;
}

nlohmann::json item_to_json(const CalibrationItem& item) {
    std::vector<bool> sup(item.supervision.begin(), item.supervision.end());
    return {{"tokens", item.tokens}, {"supervision_mask", sup}, {"level", item.level}, {"meta", item.meta}};
}

CalibrationItem item_from_json(const nlohmann::json& j) {
    CalibrationItem item;
    try {
        item.tokens = j.at("tokens").get<std::vector<int>>();
        for (bool b : j.at("supervision_mask")) item.supervision.push_back(b);
        item.level = j.at("level").get<int>();
        item.meta = j.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed dataset record: ") + e.what());
    }
    if (item.supervision.size() != item.tokens.size()) throw InputError("dataset record: mask/token length differ");
    return item;
}

void save_jsonl(const std::vector<CalibrationItem>& items, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    for (const auto& it : items) out << item_to_json(it).dump() << '\n';
}

std::vector<CalibrationItem> load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path);
    std::vector<CalibrationItem> items;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        items.push_back(item_from_json(nlohmann::json::parse(line)));
    }
    return items;
}

}  // namespace moa
