// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora.
//
// Grammar. Sequences start with BOS. "Filler" text follows a noisy
// second-order chain: next = latin[prev2][prev1] with probability
// 1 - filler_noise, otherwise a uniformly random filler symbol. `latin` is a
// Latin square, so the uniform distribution over filler pairs is stationary
// and every filler symbol has marginal frequency 1/filler_count.
//
// A retrieval body embeds key/value pairs [SEP key value] into filler, one
// pair per equal-width segment at a random offset. Queries are
// [QUERY key] followed by that key's value. Keys are drawn without
// replacement, values with replacement.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/toy_model.hpp"
#include "moa/util.hpp"

namespace moa {

struct Vocabulary {
    int pad = 0;
    int bos = 1;
    int query = 2;
    int sep = 3;
    int filler_begin = 4;
    int filler_count = 16;
    int key_begin = 20;
    int key_count = 22;
    int value_begin = 42;
    int value_count = 22;

    int size() const { return value_begin + value_count; }
    bool is_key(int t) const { return t >= key_begin && t < key_begin + key_count; }
    bool is_value(int t) const { return t >= value_begin && t < value_begin + value_count; }
    bool is_filler(int t) const { return t >= filler_begin && t < filler_begin + filler_count; }
};

struct FillerGrammar {
    std::vector<std::vector<int>> latin;  // filler_count x filler_count, symbol offsets
    double noise = 0.15;

    static FillerGrammar make(const Vocabulary& vocab, std::uint64_t grammar_seed, double noise);
};

/// Shared generator settings; every dataset is a pure function of this and a seed.
struct DatasetSpec {
    Vocabulary vocab;
    std::uint64_t grammar_seed = 7;
    double filler_noise = 0.15;

    FillerGrammar grammar() const { return FillerGrammar::make(vocab, grammar_seed, filler_noise); }
};

nlohmann::json dataset_spec_to_json(const DatasetSpec& s);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

/// Where the queried pair sits among the pairs: first 25%, middle 50%, last 25%.
enum class PositionBucket { kAny = -1, kFirst = 0, kMiddle = 1, kLast = 2 };

std::string bucket_name(PositionBucket b);

struct RetrievalInstance {
    std::vector<int> prompt;  // ends with [QUERY key]
    std::vector<int> answer;  // the queried key's value
    int n_pairs = 0;
    int queried_pair = 0;
    int key_position = 0;    // index of the queried key inside its pair
    int value_position = 0;  // index of the answer value inside its pair
    PositionBucket bucket = PositionBucket::kAny;
};

/// Pair count used when a benchmark does not pin it: clamp(length / 32, 2, 16).
int default_pair_count(int length);

/// Prompt + answer occupy exactly `length` tokens; length 0 means no filler.
/// Throws InputError when the keys or the length cannot hold n_pairs.
RetrievalInstance gen_retrieval_instance(const DatasetSpec& spec, int n_pairs, PositionBucket bucket,
                                         std::uint64_t seed, int length = 0);

/// Pretraining mixture. Each sequence is a copy task with probability
/// copy_ratio, otherwise a retrieval sequence with probability mix_ratio, else
/// local filler text.
struct CorpusMix {
    double mix_ratio = 0.8;
    double copy_ratio = 0.0;
    /// Retrieval and copy sequences supervise only the tokens that can be
    /// looked up; filler sequences are always supervised after BOS.
    bool answer_only = false;
    int queries = 0;  // query triples per retrieval sequence; <= 0 means length / 8
};

/// `size` sequences of `length` tokens. Retrieval sequences are a body
/// followed by query/answer triples; copy sequences repeat a random key/value
/// string after a filler gap.
std::vector<TrainingSequence> gen_pretrain_corpus(const DatasetSpec& spec, int size, const CorpusMix& mix,
                                                  std::uint64_t seed, int length);

/// Filler-only sequence of `length` tokens (BOS first).
std::vector<int> gen_local_sequence(const DatasetSpec& spec, const FillerGrammar& grammar, int length, Rng& rng);

enum class CalibrationMode { kAlignedLongDep, kHumanLongDep, kGenericLocal };

std::string mode_name(CalibrationMode m);
CalibrationMode mode_from_name(const std::string& s);

struct CalibrationSpec {
    CalibrationMode mode = CalibrationMode::kAlignedLongDep;
    int items_per_level = 32;
    std::vector<int> levels{128, 256, 512};
    int supervision_length = 1;
    /// generic-local only: use retrieval contexts instead of filler text.
    bool longdep_context = false;
    std::uint64_t seed = 11;
};

struct CalibrationItem {
    std::vector<int> tokens;  // padded to `level`
    SupervisionMask supervision;
    int level = 0;
    nlohmann::json meta;
};

struct CalibrationSet {
    std::vector<CalibrationItem> items;
    int skipped = 0;  // aligned items dropped because generation produced nothing
};

/// Builds calibration items per level; aligned mode runs greedy generation
/// on `model` to obtain the supervision tokens.
CalibrationSet build_calibration(const Model& model, const DatasetSpec& data, const CalibrationSpec& spec);

nlohmann::json item_to_json(const CalibrationItem& item);
CalibrationItem item_from_json(const nlohmann::json& j);
void save_jsonl(const std::vector<CalibrationItem>& items, const std::string& path);
std::vector<CalibrationItem> load_jsonl(const std::string& path);

}  // namespace moa
