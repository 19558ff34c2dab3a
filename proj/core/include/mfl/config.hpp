#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfl/data.hpp"
#include "mfl/model.hpp"
#include "mfl/optim.hpp"

namespace mfl {

struct ArchParams {
    std::int64_t heads = 1;  // routing heads; >1 only for mhmoe
    std::int64_t experts = 4;
    std::int64_t top_k = 1;
    std::int64_t expert_hidden = 0;  // 0 -> 2x expert input width
};

struct DataConfig {
    FeatureSpec spec;
    std::int64_t n_tasks = 8;
    std::int64_t sequences_per_task = 2000;
    std::int64_t pretrain_sequences = 1600;
};

struct TrainConfig {
    std::int64_t epochs = 6;
    std::int64_t batch_size = 16;
    double lr = 3e-3;
    double lr_min_frac = 0.1;
    AdamWConfig adamw;
    double divergence_factor = 10.0;
    std::int64_t divergence_patience = 100;
    std::uint64_t seed = 0;
};

struct AnalysisConfig {
    std::int64_t probe_steps = 500;
    double probe_lr = 0.1;
    double probe_l2 = 1e-4;
    std::int64_t probe_max_tokens = 4000;
    std::int64_t grad_min_support = 20;
    std::int64_t grad_max_pairs = 2000;
    std::int64_t grad_samples_per_composition = 24;
    std::int64_t grad_max_compositions = 36;
    std::int64_t mass_bins = 8;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::int64_t d_model = 64;
    std::int64_t attn_heads = 4;
    bool freeze_backbone = true;
    bool pretrain_enabled = true;
    std::int64_t pretrain_epochs = 12;
    DataConfig data;
    TrainConfig train;
    AnalysisConfig analysis;
    ArchParams arch_moe;       // standard MoE (--arch moe)
    ArchParams arch_mhmoe;     // head-wise MoE (--arch mhmoe)
    ArchParams arch_dense;     // single always-on expert (--arch dense)
};

// Strict parse: unknown keys anywhere are configuration errors. The
// MFL_SEED environment variable, when set, overrides the config seed.
ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);

ExperimentConfig default_config();

// Task permutations for --order {default|1|2|3}; orders 1-3 are defined
// for 8-task streams.
std::vector<std::int64_t> task_order_permutation(const std::string& order, std::int64_t n_tasks);

// Model config for one of the named architectures ("moe", "mhmoe", "dense").
ToyLmConfig model_config_for(const ExperimentConfig& cfg, const std::string& arch,
                             std::uint64_t init_seed);

}  // namespace mfl
