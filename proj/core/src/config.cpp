#include "mfl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mfl/error.hpp"

namespace mfl {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.contains(key))
            throw ConfigError("config: unknown key '" + key + "' in '" + where + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ArchParams parse_arch(const json& j, const std::string& where) {
    require_keys(j, where, {"heads", "experts", "top_k", "expert_hidden"});
    ArchParams a;
    read(j, "heads", a.heads);
    read(j, "experts", a.experts);
    read(j, "top_k", a.top_k);
    read(j, "expert_hidden", a.expert_hidden);
    return a;
}

json arch_to_json(const ArchParams& a) {
    return json{{"heads", a.heads},
                {"experts", a.experts},
                {"top_k", a.top_k},
                {"expert_hidden", a.expert_hidden}};
}

}  // namespace

ExperimentConfig default_config() {
    ExperimentConfig cfg;
    // Table-1 analog: standard top-1 over 4 experts; hidden width picked so
    // activated parameters per token match the mhmoe layer within 5%.
    cfg.arch_moe = {1, 4, 1, 76};
    cfg.arch_mhmoe = {8, 4, 1, 16};
    cfg.arch_dense = {1, 1, 1, 76};
    return cfg;
}

ExperimentConfig parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }

    require_keys(j, "<root>",
                 {"seed", "d_model", "attn_heads", "freeze_backbone", "pretrain", "data", "train",
                  "analysis", "arch"});

    ExperimentConfig cfg = default_config();
    read(j, "seed", cfg.seed);
    read(j, "d_model", cfg.d_model);
    read(j, "attn_heads", cfg.attn_heads);
    read(j, "freeze_backbone", cfg.freeze_backbone);

    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        require_keys(p, "pretrain", {"enabled", "epochs", "sequences"});
        read(p, "enabled", cfg.pretrain_enabled);
        read(p, "epochs", cfg.pretrain_epochs);
        read(p, "sequences", cfg.data.pretrain_sequences);
    }

    if (j.contains("data")) {
        const auto& d = j.at("data");
        require_keys(d, "data",
                     {"n_domains", "n_labels", "freq_buckets", "pos_buckets", "tokens_per_cell",
                      "vocab", "seq_len", "noise_eps", "calibration_sequences", "n_tasks",
                      "sequences_per_task"});
        auto& s = cfg.data.spec;
        read(d, "n_domains", s.n_domains);
        read(d, "n_labels", s.n_labels);
        read(d, "freq_buckets", s.freq_buckets);
        read(d, "pos_buckets", s.pos_buckets);
        read(d, "tokens_per_cell", s.tokens_per_cell);
        read(d, "vocab", s.vocab);
        read(d, "seq_len", s.seq_len);
        read(d, "noise_eps", s.noise_eps);
        read(d, "calibration_sequences", s.calibration_sequences);
        read(d, "n_tasks", cfg.data.n_tasks);
        read(d, "sequences_per_task", cfg.data.sequences_per_task);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        require_keys(t, "train",
                     {"epochs", "batch_size", "lr", "lr_min_frac", "beta1", "beta2", "eps",
                      "weight_decay", "divergence_factor", "divergence_patience"});
        read(t, "epochs", cfg.train.epochs);
        read(t, "batch_size", cfg.train.batch_size);
        read(t, "lr", cfg.train.lr);
        read(t, "lr_min_frac", cfg.train.lr_min_frac);
        read(t, "beta1", cfg.train.adamw.beta1);
        read(t, "beta2", cfg.train.adamw.beta2);
        read(t, "eps", cfg.train.adamw.eps);
        read(t, "weight_decay", cfg.train.adamw.weight_decay);
        read(t, "divergence_factor", cfg.train.divergence_factor);
        read(t, "divergence_patience", cfg.train.divergence_patience);
    }

    if (j.contains("analysis")) {
        const auto& a = j.at("analysis");
        require_keys(a, "analysis",
                     {"probe_steps", "probe_lr", "probe_l2", "probe_max_tokens", "grad_min_support",
                      "grad_max_pairs", "grad_samples_per_composition", "grad_max_compositions",
                      "mass_bins"});
        read(a, "probe_steps", cfg.analysis.probe_steps);
        read(a, "probe_lr", cfg.analysis.probe_lr);
        read(a, "probe_l2", cfg.analysis.probe_l2);
        read(a, "probe_max_tokens", cfg.analysis.probe_max_tokens);
        read(a, "grad_min_support", cfg.analysis.grad_min_support);
        read(a, "grad_max_pairs", cfg.analysis.grad_max_pairs);
        read(a, "grad_samples_per_composition", cfg.analysis.grad_samples_per_composition);
        read(a, "grad_max_compositions", cfg.analysis.grad_max_compositions);
        read(a, "mass_bins", cfg.analysis.mass_bins);
    }

    if (j.contains("arch")) {
        const auto& a = j.at("arch");
        require_keys(a, "arch", {"moe", "mhmoe", "dense"});
        if (a.contains("moe")) cfg.arch_moe = parse_arch(a.at("moe"), "arch.moe");
        if (a.contains("mhmoe")) cfg.arch_mhmoe = parse_arch(a.at("mhmoe"), "arch.mhmoe");
        if (a.contains("dense")) cfg.arch_dense = parse_arch(a.at("dense"), "arch.dense");
    }

    if (const char* env = std::getenv("MFL_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("config: MFL_SEED is not an unsigned integer");
        }
    }

    cfg.data.spec.validate();
    if (cfg.train.epochs < 0 || cfg.train.batch_size <= 0)
        throw ConfigError("config: bad training schedule");
    if (cfg.train.lr <= 0.0) throw ConfigError("config: lr must be positive");
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_json(text);
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["d_model"] = cfg.d_model;
    j["attn_heads"] = cfg.attn_heads;
    j["freeze_backbone"] = cfg.freeze_backbone;
    j["pretrain"] = {{"enabled", cfg.pretrain_enabled},
                     {"epochs", cfg.pretrain_epochs},
                     {"sequences", cfg.data.pretrain_sequences}};
    const auto& s = cfg.data.spec;
    j["data"] = {{"n_domains", s.n_domains},
                 {"n_labels", s.n_labels},
                 {"freq_buckets", s.freq_buckets},
                 {"pos_buckets", s.pos_buckets},
                 {"tokens_per_cell", s.tokens_per_cell},
                 {"vocab", s.vocab},
                 {"seq_len", s.seq_len},
                 {"noise_eps", s.noise_eps},
                 {"calibration_sequences", s.calibration_sequences},
                 {"n_tasks", cfg.data.n_tasks},
                 {"sequences_per_task", cfg.data.sequences_per_task}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"lr_min_frac", cfg.train.lr_min_frac},
                  {"beta1", cfg.train.adamw.beta1},
                  {"beta2", cfg.train.adamw.beta2},
                  {"eps", cfg.train.adamw.eps},
                  {"weight_decay", cfg.train.adamw.weight_decay},
                  {"divergence_factor", cfg.train.divergence_factor},
                  {"divergence_patience", cfg.train.divergence_patience}};
    j["analysis"] = {{"probe_steps", cfg.analysis.probe_steps},
                     {"probe_lr", cfg.analysis.probe_lr},
                     {"probe_l2", cfg.analysis.probe_l2},
                     {"probe_max_tokens", cfg.analysis.probe_max_tokens},
                     {"grad_min_support", cfg.analysis.grad_min_support},
                     {"grad_max_pairs", cfg.analysis.grad_max_pairs},
                     {"grad_samples_per_composition", cfg.analysis.grad_samples_per_composition},
                     {"grad_max_compositions", cfg.analysis.grad_max_compositions},
                     {"mass_bins", cfg.analysis.mass_bins}};
    j["arch"] = {{"moe", arch_to_json(cfg.arch_moe)},
                 {"mhmoe", arch_to_json(cfg.arch_mhmoe)},
                 {"dense", arch_to_json(cfg.arch_dense)}};
    return j.dump(2);
}

std::vector<std::int64_t> task_order_permutation(const std::string& order, std::int64_t n_tasks) {
    std::vector<std::int64_t> identity(static_cast<std::size_t>(n_tasks));
    for (std::int64_t i = 0; i < n_tasks; ++i) identity[static_cast<std::size_t>(i)] = i;
    if (order == "default") return identity;
    if (n_tasks != 8)
        throw ConfigError("task_order_permutation: orders 1-3 are defined for 8-task streams");
    if (order == "1") return {1, 0, 4, 3, 2, 5, 6, 7};
    if (order == "2") return {1, 0, 4, 3, 6, 5, 2, 7};
    if (order == "3") return {1, 0, 4, 3, 2, 6, 5, 7};
    throw ConfigError("task_order_permutation: unknown order '" + order + "'");
}

ToyLmConfig model_config_for(const ExperimentConfig& cfg, const std::string& arch,
                             std::uint64_t init_seed) {
    ToyLmConfig mc;
    mc.vocab = cfg.data.spec.vocab;
    mc.d_model = cfg.d_model;
    mc.attn_heads = cfg.attn_heads;
    mc.max_seq = cfg.data.spec.seq_len;
    mc.freeze_backbone = false;  // applied after pretraining
    mc.init_seed = init_seed;

    const ArchParams* a = nullptr;
    if (arch == "moe") {
        a = &cfg.arch_moe;
        mc.moe_kind = MoeKind::Standard;
    } else if (arch == "mhmoe") {
        a = &cfg.arch_mhmoe;
        mc.moe_kind = MoeKind::MultiHead;
    } else if (arch == "dense") {
        a = &cfg.arch_dense;
        mc.moe_kind = MoeKind::Standard;
    } else {
        throw ConfigError("model_config_for: unknown arch '" + arch + "'");
    }
    mc.moe_heads = a->heads;
    mc.n_experts = a->experts;
    mc.top_k = a->top_k;
    mc.expert_hidden = a->expert_hidden;
    return mc;
}

}  // namespace mfl
