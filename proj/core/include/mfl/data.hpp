#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mfl/rng.hpp"

namespace mfl {

// Token-level feature tuple: (domain, label, frequency bucket, position bucket).
struct FeatureComposition {
    std::array<std::int16_t, 4> y{};

    auto operator<=>(const FeatureComposition&) const = default;
    std::string str() const;
    std::int64_t encode(const struct FeatureSpec& spec) const;
};

// Grammar layout and bucketing rules. The vocabulary is partitioned into
// (domain, label) cells of contiguous token ids; frequency buckets are
// count quantiles frozen from a calibration corpus; position buckets are
// equal-width over [0, seq_len).
struct FeatureSpec {
    std::int64_t n_domains = 3;
    std::int64_t n_labels = 3;
    std::int64_t freq_buckets = 4;
    std::int64_t pos_buckets = 4;
    std::int64_t tokens_per_cell = 48;
    std::int64_t vocab = 512;
    std::int64_t seq_len = 64;
    double noise_eps = 0.15;
    std::int64_t calibration_sequences = 400;

    std::int64_t cells() const { return n_domains * n_labels; }
    std::int64_t grammar_vocab() const { return cells() * tokens_per_cell; }
    std::int64_t compositions_per_cell() const { return freq_buckets * pos_buckets; }
    std::int64_t cell_index(std::int64_t domain, std::int64_t label) const {
        return domain * n_labels + label;
    }
    std::int64_t cell_base(std::int64_t cell) const { return cell * tokens_per_cell; }
    std::int64_t cell_of_token(std::int64_t token) const { return token / tokens_per_cell; }
    std::int64_t domain_of_token(std::int64_t token) const { return cell_of_token(token) / n_labels; }
    std::int64_t label_of_token(std::int64_t token) const { return cell_of_token(token) % n_labels; }
    std::int64_t position_bucket(std::int64_t position) const {
        return position * pos_buckets / seq_len;
    }

    void validate() const;  // ConfigError on vocabulary region overflow etc.
    std::uint64_t hash() const;
};

struct TokenRecord {
    std::int64_t token = 0;
    std::int64_t position = 0;
    FeatureComposition composition;
    std::int64_t task = 0;
};

// Frozen per-token-type statistics from the calibration corpus.
struct CorpusStats {
    std::vector<std::int64_t> counts;       // indexed by token id
    std::vector<std::int16_t> freq_bucket;  // bucket 0 = most frequent
    bool frozen = false;
};

CorpusStats build_corpus_stats(const FeatureSpec& spec, std::uint64_t seed);

FeatureComposition composition_of(std::int64_t token, std::int64_t position,
                                  const FeatureSpec& spec, const CorpusStats& stats);

// One task of the compositional grammar: within its cells, every composition
// deterministically targets one cell token (a task-specific assignment),
// blurred by uniform in-cell noise.
struct TaskDef {
    std::int64_t id = 0;
    std::vector<std::int64_t> cells;     // cell indices this task draws from
    std::int64_t n_sequences = 2000;
    std::int64_t pattern_variants = 1;   // >1 gives per-sequence target maps
    double noise_eps = -1.0;             // <0 -> FeatureSpec default
    std::uint64_t seed_salt = 0;
};

struct Sequence {
    std::vector<std::int64_t> tokens;
    std::vector<TokenRecord> records;
};

// Target token (absolute id) for a composition under a task/variant map.
std::int64_t emission_target(const TaskDef& def, const FeatureSpec& spec, std::int64_t cell,
                             std::int64_t variant, const FeatureComposition& comp);

// Deterministic in (def, spec, stats, seed); sequence i is reproducible
// in isolation from (def.id, seed, i).
std::vector<Sequence> generate_task(const TaskDef& def, const FeatureSpec& spec,
                                    const CorpusStats& stats, std::uint64_t seed);

Sequence generate_sequence(const TaskDef& def, const FeatureSpec& spec, const CorpusStats& stats,
                           std::uint64_t seed, std::int64_t index);

struct TaskData {
    TaskDef def;
    std::vector<Sequence> train;
    std::vector<Sequence> eval;
};

// 90/10 split by index hash; eval indices are disjoint from train by
// construction. Throws on duplicate task ids or fewer than two tasks.
std::vector<TaskData> task_sequence(const std::vector<TaskDef>& order, const FeatureSpec& spec,
                                    const CorpusStats& stats, std::uint64_t seed);

// Split of a single task without the >= 2 tasks requirement (pretraining).
TaskData split_task(const TaskDef& def, const FeatureSpec& spec, const CorpusStats& stats,
                    std::uint64_t seed);

// Default continual stream: task i owns cell i-1. Task 0 is the pretrain
// task covering every cell with several pattern variants.
std::vector<TaskDef> default_task_defs(const FeatureSpec& spec, std::int64_t n_tasks,
                                       std::int64_t sequences_per_task);
TaskDef pretrain_task_def(const FeatureSpec& spec, std::int64_t sequences);

// Corpus file: line-delimited JSON TokenRecords; manifest binds spec hash,
// seed and the frozen calibration counts.
void save_corpus(const std::string& path, const std::vector<Sequence>& sequences);
std::vector<Sequence> load_corpus(const std::string& path);
void save_manifest(const std::string& path, const FeatureSpec& spec, std::uint64_t seed,
                   const CorpusStats& stats);
CorpusStats load_manifest(const std::string& path, const FeatureSpec& expected_spec);

}  // namespace mfl
