#include "mfl/runner.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mfl/error.hpp"
#include "mfl/optim.hpp"
#include "mfl/rng.hpp"

namespace mfl {

namespace fs = std::filesystem;

// ---- ScoreMatrix ----

ScoreMatrix::ScoreMatrix(std::int64_t n) : n_(n) {
    if (n <= 0) throw ValueError("ScoreMatrix: size must be positive");
    values_.assign(static_cast<std::size_t>(n * n), 0.0);
    known_.assign(static_cast<std::size_t>(n * n), false);
}

double ScoreMatrix::at(std::int64_t task, std::int64_t after) const {
    if (task < 0 || task >= n_ || after < 0 || after >= n_)
        throw IndexError("ScoreMatrix: index out of range");
    if (!known_[static_cast<std::size_t>(task * n_ + after)])
        throw StateError("ScoreMatrix: f_" + std::to_string(task) + "(w_" + std::to_string(after) +
                         ") was never filled");
    return values_[static_cast<std::size_t>(task * n_ + after)];
}

void ScoreMatrix::set(std::int64_t task, std::int64_t after, double score) {
    if (task < 0 || task >= n_ || after < 0 || after >= n_)
        throw IndexError("ScoreMatrix: index out of range");
    if (after < task) throw ValueError("ScoreMatrix: f_i(w_j) is defined only for j >= i");
    values_[static_cast<std::size_t>(task * n_ + after)] = score;
    known_[static_cast<std::size_t>(task * n_ + after)] = true;
}

bool ScoreMatrix::known(std::int64_t task, std::int64_t after) const {
    if (task < 0 || task >= n_ || after < 0 || after >= n_) return false;
    return known_[static_cast<std::size_t>(task * n_ + after)];
}

double op_metric(const ScoreMatrix& m, std::int64_t n) {
    if (n <= 0 || n > m.size()) throw ValueError("op_metric: bad task count");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += m.at(i, n - 1);
    return acc / static_cast<double>(n);
}

double bwt_metric(const ScoreMatrix& m, std::int64_t n) {
    if (n <= 0 || n > m.size()) throw ValueError("bwt_metric: bad task count");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += m.at(i, n - 1) - m.at(i, i);
    return acc / static_cast<double>(n);
}

// ---- training ----

TrainResult train_task(ToyLm& model, const TaskData& task, const TrainConfig& cfg) {
    TrainResult result;
    if (task.train.empty()) throw ValueError("train_task: task has no training split");

    ParamList trainable = model.trainable_params();
    if (trainable.empty()) throw StateError("train_task: no trainable parameters");
    AdamWConfig acfg = cfg.adamw;
    acfg.lr = cfg.lr;
    AdamW opt(acfg);

    const auto n_train = static_cast<std::int64_t>(task.train.size());
    const std::int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = cfg.epochs * steps_per_epoch;

    double initial_loss = 0.0;
    std::int64_t high_loss_streak = 0;
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(task.def.id),
                                 static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        for (std::int64_t start = 0; start < n_train; start += cfg.batch_size, ++step) {
            const std::int64_t stop = std::min(n_train, start + cfg.batch_size);
            opt.set_lr(cosine_lr(cfg.lr, cfg.lr_min_frac, step, total_steps));
            zero_grads(trainable);

            double step_loss = 0.0;
            ComputationRecord record;
            try {
                RecordScope scope(record);
                Tensor total;
                for (std::int64_t i = start; i < stop; ++i) {
                    const auto& seq = task.train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
                    Tensor loss = model.lm_loss(seq.tokens).loss;
                    total = total.defined() ? add(total, loss) : loss;
                }
                Tensor batch_loss = scale(total, 1.0 / static_cast<double>(stop - start));
                step_loss = batch_loss.item();
                backward(batch_loss);
            } catch (const ValueError& e) {
                throw NumericError("train_task: numeric failure at step " + std::to_string(step) +
                                   " of task " + std::to_string(task.def.id) + ": " + e.what());
            }
            opt.step(trainable);
            result.step_losses.push_back(step_loss);

            if (!std::isfinite(step_loss))
                throw NumericError("train_task: non-finite loss at step " + std::to_string(step) +
                                   " of task " + std::to_string(task.def.id));
            if (step == 0) initial_loss = step_loss;
            if (step_loss > cfg.divergence_factor * initial_loss) {
                if (++high_loss_streak >= cfg.divergence_patience)
                    throw NumericError(
                        "train_task: divergence on task " + std::to_string(task.def.id) + ", loss " +
                        std::to_string(step_loss) + " > " + std::to_string(cfg.divergence_factor) +
                        "x initial " + std::to_string(initial_loss) + " for " +
                        std::to_string(high_loss_streak) + " consecutive steps");
            } else {
                high_loss_streak = 0;
            }
        }
    }
    result.steps = step;
    return result;
}

double eval_accuracy(const ToyLm& model, std::span<const Sequence> sequences) {
    NoRecordScope no_record;
    std::int64_t hits = 0, total = 0;
    for (const auto& seq : sequences) {
        LmForward fwd = model.forward(seq.tokens);
        const auto t_len = static_cast<std::int64_t>(seq.tokens.size());
        const std::int64_t vocab = fwd.logits.dim(1);
        const auto data = fwd.logits.data();
        for (std::int64_t t = 0; t + 1 < t_len; ++t) {
            const double* row = data.data() + t * vocab;
            std::int64_t best = 0;
            for (std::int64_t v = 1; v < vocab; ++v)
                if (row[v] > row[best]) best = v;
            if (best == seq.tokens[static_cast<std::size_t>(t + 1)]) ++hits;
            ++total;
        }
    }
    if (total == 0) throw ValueError("eval_accuracy: no scored positions");
    return static_cast<double>(hits) / static_cast<double>(total);
}

std::vector<TraceRecord> collect_traces(const ToyLm& model, std::span<const Sequence> sequences,
                                        std::int64_t step) {
    NoRecordScope no_record;
    std::vector<TraceRecord> out;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        const auto& seq = sequences[s];
        LmLoss scored = model.lm_loss(seq.tokens);
        const auto t_scored = static_cast<std::int64_t>(scored.per_token.size());
        for (std::int64_t t = 0; t < t_scored; ++t) {
            TraceRecord rec;
            rec.step = step;
            rec.task = seq.records[static_cast<std::size_t>(t)].task;
            rec.seq = static_cast<std::int64_t>(s);
            rec.position = t;
            rec.composition = seq.records[static_cast<std::size_t>(t)].composition;
            rec.route_sets = scored.trace[static_cast<std::size_t>(t)].sets;
            rec.gates = scored.trace[static_cast<std::size_t>(t)].gates;
            rec.loss = scored.per_token[static_cast<std::size_t>(t)];
            out.push_back(std::move(rec));
        }
    }
    return out;
}

std::vector<double> eval_token_losses(const ToyLm& model, std::span<const Sequence> sequences) {
    NoRecordScope no_record;
    std::vector<double> out;
    for (const auto& seq : sequences) {
        LmLoss scored = model.lm_loss(seq.tokens);
        out.insert(out.end(), scored.per_token.begin(), scored.per_token.end());
    }
    return out;
}

// ---- checkpoints ----

namespace {

std::string arch_string(const ToyLmConfig& cfg) {
    nlohmann::json j;
    j["vocab"] = cfg.vocab;
    j["d_model"] = cfg.d_model;
    j["attn_heads"] = cfg.attn_heads;
    j["max_seq"] = cfg.max_seq;
    j["moe_kind"] = cfg.moe_kind == MoeKind::Standard ? "standard" : "multihead";
    j["moe_heads"] = cfg.moe_heads;
    j["n_experts"] = cfg.n_experts;
    j["top_k"] = cfg.top_k;
    j["expert_hidden"] = cfg.expert_hidden;
    j["freeze_backbone"] = cfg.freeze_backbone;
    j["init_seed"] = cfg.init_seed;
    return j.dump();
}

ToyLmConfig parse_arch_string(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ToyLmConfig cfg;
    cfg.vocab = j.at("vocab").get<std::int64_t>();
    cfg.d_model = j.at("d_model").get<std::int64_t>();
    cfg.attn_heads = j.at("attn_heads").get<std::int64_t>();
    cfg.max_seq = j.at("max_seq").get<std::int64_t>();
    cfg.moe_kind =
        j.at("moe_kind").get<std::string>() == "standard" ? MoeKind::Standard : MoeKind::MultiHead;
    cfg.moe_heads = j.at("moe_heads").get<std::int64_t>();
    cfg.n_experts = j.at("n_experts").get<std::int64_t>();
    cfg.top_k = j.at("top_k").get<std::int64_t>();
    cfg.expert_hidden = j.at("expert_hidden").get<std::int64_t>();
    cfg.freeze_backbone = j.at("freeze_backbone").get<bool>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    return cfg;
}

}  // namespace

Checkpoint make_checkpoint(const ToyLm& model, std::int64_t step, std::int64_t task_index,
                           std::uint64_t seed) {
    Checkpoint ckpt;
    ckpt.arch = arch_string(model.config());
    ckpt.step = step;
    ckpt.task_index = task_index;
    ckpt.seed = seed;
    for (const auto& p : model.params()) ckpt.params.push_back({p.name, p.tensor.detach()});
    return ckpt;
}

ToyLm model_from_checkpoint(const Checkpoint& ckpt) {
    ToyLm model(parse_arch_string(ckpt.arch));
    model.load_params(ckpt.params);
    return model;
}

SequenceResult run_sequence(ToyLm& model, const std::vector<TaskData>& tasks,
                            const TrainConfig& cfg) {
    const auto n = static_cast<std::int64_t>(tasks.size());
    if (n < 2) throw ConfigError("run_sequence: need at least two tasks");

    SequenceResult res;
    res.scores = ScoreMatrix(n);
    res.activated_params_per_token = model.activated_params_per_token();
    std::int64_t global_step = 0;

    for (std::int64_t j = 0; j < n; ++j) {
        TrainResult tr = train_task(model, tasks[static_cast<std::size_t>(j)], cfg);
        global_step += tr.steps;
        res.step_losses.push_back(std::move(tr.step_losses));

        for (std::int64_t i = 0; i <= j; ++i)
            res.scores.set(i, j, eval_accuracy(model, tasks[static_cast<std::size_t>(i)].eval));

        res.checkpoints.push_back(make_checkpoint(model, global_step, j, cfg.seed));
        res.traces.push_back(collect_traces(model, tasks[static_cast<std::size_t>(j)].eval, global_step));
    }
    return res;
}

bool matched_activated_budget(std::int64_t a, std::int64_t b, double tolerance) {
    const double hi = static_cast<double>(std::max(a, b));
    const double lo = static_cast<double>(std::min(a, b));
    if (lo <= 0.0) return false;
    return (hi - lo) / hi <= tolerance;
}

// ---- orchestration ----

ExperimentRun run_experiment(const ExperimentConfig& cfg, const std::string& arch,
                             const std::string& order) {
    ExperimentRun run;
    run.config = cfg;
    run.arch = arch;
    run.order = order;

    const FeatureSpec& spec = cfg.data.spec;
    run.stats = build_corpus_stats(spec, cfg.seed);

    auto defs = default_task_defs(spec, cfg.data.n_tasks, cfg.data.sequences_per_task);
    const auto perm = task_order_permutation(order, cfg.data.n_tasks);
    std::vector<TaskDef> ordered;
    for (const auto idx : perm) ordered.push_back(defs[static_cast<std::size_t>(idx)]);
    run.tasks = task_sequence(ordered, spec, run.stats, cfg.seed);

    ToyLm model(model_config_for(cfg, arch, mix_seed(cfg.seed, 0x4d4f44454cull)));  // "MODEL"

    TrainConfig tcfg = cfg.train;
    tcfg.seed = cfg.seed;
    if (cfg.pretrain_enabled) {
        run.pretrain = split_task(pretrain_task_def(spec, cfg.data.pretrain_sequences), spec,
                                  run.stats, cfg.seed);
        TrainConfig pcfg = tcfg;
        pcfg.epochs = cfg.pretrain_epochs;
        train_task(model, run.pretrain, pcfg);
        run.pretrain_eval_accuracy = eval_accuracy(model, run.pretrain.eval);
    }
    model.set_freeze_backbone(cfg.freeze_backbone);

    run.result = run_sequence(model, run.tasks, tcfg);
    return run;
}

void write_run_dir(const std::string& dir, const ExperimentRun& run) {
    fs::create_directories(dir);
    fs::create_directories(dir + "/checkpoints");
    fs::create_directories(dir + "/traces");

    {
        std::ofstream out(dir + "/config.json", std::ios::trunc);
        out << config_to_json(run.config) << '\n';
        nlohmann::json meta;
        meta["arch"] = run.arch;
        meta["order"] = run.order;
        meta["activated_params_per_token"] = run.result.activated_params_per_token;
        meta["pretrain_eval_accuracy"] = run.pretrain_eval_accuracy;
        meta["bwt_sign_note"] =
            "negative = forgetting (table convention); the appendix formula has the opposite sign";
        const auto n = static_cast<std::int64_t>(run.tasks.size());
        meta["op"] = op_metric(run.result.scores, n);
        meta["bwt"] = bwt_metric(run.result.scores, n);
        std::ofstream mout(dir + "/metrics.json", std::ios::trunc);
        mout << meta.dump(2) << '\n';
    }

    save_manifest(dir + "/manifest.json", run.config.data.spec, run.config.seed, run.stats);

    {
        std::ofstream out(dir + "/score_matrix.csv", std::ios::trunc);
        out << "task,after_task,score\n";
        const auto n = static_cast<std::int64_t>(run.tasks.size());
        out.precision(17);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i; j < n; ++j)
                out << i << ',' << j << ',' << run.result.scores.at(i, j) << '\n';
    }

    for (std::size_t j = 0; j < run.result.checkpoints.size(); ++j)
        save_checkpoint(dir + "/checkpoints/task_" + std::to_string(j) + ".mfl",
                        run.result.checkpoints[j]);
    for (std::size_t j = 0; j < run.result.traces.size(); ++j)
        save_traces(dir + "/traces/task_" + std::to_string(j) + ".jsonl", run.result.traces[j]);
}

LoadedRun load_run_dir(const std::string& dir) {
    LoadedRun out;
    out.config = parse_config_file(dir + "/config.json");
    {
        std::ifstream in(dir + "/metrics.json");
        if (!in) throw StateError("load_run_dir: missing metrics.json in '" + dir + "'");
        nlohmann::json meta;
        in >> meta;
        out.arch = meta.at("arch").get<std::string>();
        out.order = meta.at("order").get<std::string>();
    }
    out.stats = load_manifest(dir + "/manifest.json", out.config.data.spec);

    for (std::int64_t j = 0;; ++j) {
        const std::string path = dir + "/checkpoints/task_" + std::to_string(j) + ".mfl";
        if (!fs::exists(path)) break;
        out.checkpoints.push_back(load_checkpoint(path));
    }
    if (out.checkpoints.empty()) throw StateError("load_run_dir: no checkpoints in '" + dir + "'");
    for (std::int64_t j = 0;; ++j) {
        const std::string path = dir + "/traces/task_" + std::to_string(j) + ".jsonl";
        if (!fs::exists(path)) break;
        out.traces.push_back(load_traces(path));
    }
    out.final_model = model_from_checkpoint(out.checkpoints.back());
    return out;
}

}  // namespace mfl
