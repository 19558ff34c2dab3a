#include "mfl/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "mfl/error.hpp"

namespace mfl {

std::string FeatureComposition::str() const {
    std::string s;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (i) s += '.';
        s += std::to_string(y[i]);
    }
    return s;
}

std::int64_t FeatureComposition::encode(const FeatureSpec& spec) const {
    return ((static_cast<std::int64_t>(y[0]) * spec.n_labels + y[1]) * spec.freq_buckets + y[2]) *
               spec.pos_buckets +
           y[3];
}

void FeatureSpec::validate() const {
    if (n_domains < 2 || n_labels < 2 || freq_buckets < 2 || pos_buckets < 2)
        throw ConfigError("feature spec: every feature needs at least two labels");
    if (tokens_per_cell % freq_buckets != 0)
        throw ConfigError("feature spec: freq_buckets must divide tokens_per_cell");
    if (grammar_vocab() > vocab)
        throw ConfigError("feature spec: vocabulary region overflow, grammar needs " +
                          std::to_string(grammar_vocab()) + " tokens but vocab is " +
                          std::to_string(vocab));
    if (compositions_per_cell() > tokens_per_cell)
        throw ConfigError("feature spec: more compositions per cell than target tokens");
    if (seq_len % pos_buckets != 0)
        throw ConfigError("feature spec: pos_buckets must divide seq_len");
    if (noise_eps < 0.0 || noise_eps >= 1.0)
        throw ConfigError("feature spec: noise_eps must lie in [0, 1)");
}

std::uint64_t FeatureSpec::hash() const {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (const std::int64_t v : {n_domains, n_labels, freq_buckets, pos_buckets, tokens_per_cell,
                                 vocab, seq_len, calibration_sequences})
        h = mix_seed(h, static_cast<std::uint64_t>(v));
    h = mix_seed(h, static_cast<std::uint64_t>(noise_eps * 1e9));
    return h;
}

namespace {

// Designed frequency tier, used only while calibrating: the cell is laid
// out as freq_buckets contiguous tiers.
std::int64_t tier_of_token(const FeatureSpec& spec, std::int64_t token) {
    const std::int64_t within = token - spec.cell_base(spec.cell_of_token(token));
    return within / (spec.tokens_per_cell / spec.freq_buckets);
}

std::int64_t draw_next_token(Rng& rng, const FeatureSpec& spec, double eps, std::int64_t cell,
                             std::int64_t target) {
    if (rng.uniform() >= eps) return target;
    return spec.cell_base(cell) + rng.uniform_int(spec.tokens_per_cell);
}

std::vector<std::int64_t> permutation(std::uint64_t seed, std::int64_t n) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    rng.shuffle(perm);
    return perm;
}

}  // namespace

CorpusStats build_corpus_stats(const FeatureSpec& spec, std::uint64_t seed) {
    spec.validate();
    CorpusStats stats;
    stats.counts.assign(static_cast<std::size_t>(spec.vocab), 0);

    // Calibration stream: tier-conditioned targets across all cells. Only
    // the counts matter; the resulting quantile buckets are frozen and every
    // real corpus conditions on those buckets instead.
    const std::uint64_t cal_seed = mix_seed(seed, 0x43414cull);  // "CAL"
    for (std::int64_t idx = 0; idx < spec.calibration_sequences; ++idx) {
        Rng rng(mix_seed(cal_seed, static_cast<std::uint64_t>(idx)));
        const std::int64_t cell = rng.uniform_int(spec.cells());
        const auto perm = permutation(mix_seed(cal_seed, static_cast<std::uint64_t>(cell),
                                               static_cast<std::uint64_t>(idx % 4)),
                                      spec.tokens_per_cell);
        std::int64_t token = spec.cell_base(cell) + rng.uniform_int(spec.tokens_per_cell);
        ++stats.counts[static_cast<std::size_t>(token)];
        for (std::int64_t t = 0; t + 1 < spec.seq_len; ++t) {
            const std::int64_t tier = tier_of_token(spec, token);
            const std::int64_t slot = tier * spec.pos_buckets + spec.position_bucket(t);
            const std::int64_t target = spec.cell_base(cell) + perm[static_cast<std::size_t>(slot)];
            token = draw_next_token(rng, spec, spec.noise_eps, cell, target);
            ++stats.counts[static_cast<std::size_t>(token)];
        }
    }

    // Quantile buckets over observed types: sort by count descending (ties
    // by id) and split into equal-size groups; bucket 0 is the top bucket.
    std::vector<std::int64_t> observed;
    for (std::int64_t tok = 0; tok < spec.vocab; ++tok)
        if (stats.counts[static_cast<std::size_t>(tok)] > 0) observed.push_back(tok);
    if (static_cast<std::int64_t>(observed.size()) < spec.freq_buckets)
        throw ValueError("build_corpus_stats: calibration corpus too small to bucket");
    std::sort(observed.begin(), observed.end(), [&](std::int64_t a, std::int64_t b) {
        const auto ca = stats.counts[static_cast<std::size_t>(a)];
        const auto cb = stats.counts[static_cast<std::size_t>(b)];
        if (ca != cb) return ca > cb;
        return a < b;
    });
    stats.freq_bucket.assign(static_cast<std::size_t>(spec.vocab),
                             static_cast<std::int16_t>(spec.freq_buckets - 1));
    const auto n_obs = static_cast<std::int64_t>(observed.size());
    for (std::int64_t i = 0; i < n_obs; ++i) {
        const auto bucket = static_cast<std::int16_t>(i * spec.freq_buckets / n_obs);
        stats.freq_bucket[static_cast<std::size_t>(observed[static_cast<std::size_t>(i)])] = bucket;
    }
    stats.frozen = true;
    return stats;
}

FeatureComposition composition_of(std::int64_t token, std::int64_t position,
                                  const FeatureSpec& spec, const CorpusStats& stats) {
    if (!stats.frozen) throw StateError("composition_of: corpus stats are not available");
    if (token < 0 || token >= spec.vocab) throw IndexError("composition_of: token id out of range");
    if (position < 0 || position >= spec.seq_len)
        throw IndexError("composition_of: position out of range");
    FeatureComposition c;
    if (token < spec.grammar_vocab()) {
        c.y[0] = static_cast<std::int16_t>(spec.domain_of_token(token));
        c.y[1] = static_cast<std::int16_t>(spec.label_of_token(token));
    } else {
        c.y[0] = 0;
        c.y[1] = 0;
    }
    c.y[2] = stats.freq_bucket[static_cast<std::size_t>(token)];
    c.y[3] = static_cast<std::int16_t>(spec.position_bucket(position));
    return c;
}

namespace {

// Target maps are keyed by the task's grammar salt (not its id), so two
// task defs with equal salts define the same grammar.
std::vector<std::int64_t> target_permutation(const TaskDef& def, const FeatureSpec& spec,
                                             std::int64_t cell, std::int64_t variant) {
    return permutation(mix_seed(def.seed_salt, static_cast<std::uint64_t>(cell),
                                static_cast<std::uint64_t>(variant)),
                       spec.tokens_per_cell);
}

}  // namespace

std::int64_t emission_target(const TaskDef& def, const FeatureSpec& spec, std::int64_t cell,
                             std::int64_t variant, const FeatureComposition& comp) {
    const std::int64_t slot = static_cast<std::int64_t>(comp.y[2]) * spec.pos_buckets + comp.y[3];
    const auto perm = target_permutation(def, spec, cell, variant);
    return spec.cell_base(cell) + perm[static_cast<std::size_t>(slot)];
}

Sequence generate_sequence(const TaskDef& def, const FeatureSpec& spec, const CorpusStats& stats,
                           std::uint64_t seed, std::int64_t index) {
    if (!stats.frozen) throw StateError("generate_sequence: corpus stats are not available");
    if (def.cells.empty()) throw ConfigError("generate_sequence: task has no cells");
    for (const auto cell : def.cells)
        if (cell < 0 || cell >= spec.cells())
            throw ConfigError("generate_sequence: cell index out of range");

    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(def.id), static_cast<std::uint64_t>(index)));
    const std::int64_t cell =
        def.cells[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(def.cells.size())))];
    const double eps = def.noise_eps >= 0.0 ? def.noise_eps : spec.noise_eps;

    Sequence out;
    out.tokens.reserve(static_cast<std::size_t>(spec.seq_len));
    out.records.reserve(static_cast<std::size_t>(spec.seq_len));

    std::int64_t token = spec.cell_base(cell) + rng.uniform_int(spec.tokens_per_cell);
    // The active pattern variant is observable: the opening token selects
    // it. A causal model can recover it by attending to position 0.
    const std::int64_t variant =
        def.pattern_variants > 1 ? (token - spec.cell_base(cell)) % def.pattern_variants : 0;
    const auto perm = target_permutation(def, spec, cell, variant);
    for (std::int64_t t = 0; t < spec.seq_len; ++t) {
        const FeatureComposition comp = composition_of(token, t, spec, stats);
        out.tokens.push_back(token);
        out.records.push_back({token, t, comp, def.id});
        if (t + 1 == spec.seq_len) break;
        const std::int64_t slot = static_cast<std::int64_t>(comp.y[2]) * spec.pos_buckets + comp.y[3];
        const std::int64_t target = spec.cell_base(cell) + perm[static_cast<std::size_t>(slot)];
        token = draw_next_token(rng, spec, eps, cell, target);
    }
    return out;
}

std::vector<Sequence> generate_task(const TaskDef& def, const FeatureSpec& spec,
                                    const CorpusStats& stats, std::uint64_t seed) {
    std::vector<Sequence> out;
    out.reserve(static_cast<std::size_t>(def.n_sequences));
    for (std::int64_t i = 0; i < def.n_sequences; ++i)
        out.push_back(generate_sequence(def, spec, stats, seed, i));
    return out;
}

TaskData split_task(const TaskDef& def, const FeatureSpec& spec, const CorpusStats& stats,
                    std::uint64_t seed) {
    TaskData data;
    data.def = def;
    for (std::int64_t i = 0; i < def.n_sequences; ++i) {
        Sequence seq = generate_sequence(def, spec, stats, seed, i);
        const std::uint64_t h =
            mix_seed(mix_seed(seed, 0x53504c4954ull),  // "SPLIT"
                     static_cast<std::uint64_t>(def.id), static_cast<std::uint64_t>(i));
        if (h % 10 == 0)
            data.eval.push_back(std::move(seq));
        else
            data.train.push_back(std::move(seq));
    }
    return data;
}

std::vector<TaskData> task_sequence(const std::vector<TaskDef>& order, const FeatureSpec& spec,
                                    const CorpusStats& stats, std::uint64_t seed) {
    if (order.size() < 2) throw ConfigError("task_sequence: need at least two tasks");
    std::set<std::int64_t> ids;
    for (const auto& def : order)
        if (!ids.insert(def.id).second)
            throw ConfigError("task_sequence: duplicate task id " + std::to_string(def.id));
    std::vector<TaskData> out;
    out.reserve(order.size());
    for (const auto& def : order) out.push_back(split_task(def, spec, stats, seed));
    return out;
}

std::vector<TaskDef> default_task_defs(const FeatureSpec& spec, std::int64_t n_tasks,
                                       std::int64_t sequences_per_task) {
    if (n_tasks > spec.cells())
        throw ConfigError("default_task_defs: more tasks than (domain, label) cells");
    std::vector<TaskDef> defs;
    for (std::int64_t i = 0; i < n_tasks; ++i) {
        TaskDef def;
        def.id = i + 1;
        def.cells = {i};
        def.n_sequences = sequences_per_task;
        def.pattern_variants = 1;
        def.seed_salt = mix_seed(0x5441534bull, static_cast<std::uint64_t>(def.id));  // "TASK"
        defs.push_back(std::move(def));
    }
    return defs;
}

TaskDef pretrain_task_def(const FeatureSpec& spec, std::int64_t sequences) {
    TaskDef def;
    def.id = 0;
    def.cells.resize(static_cast<std::size_t>(spec.cells()));
    std::iota(def.cells.begin(), def.cells.end(), 0);
    def.n_sequences = sequences;
    def.pattern_variants = 8;
    def.seed_salt = 0x505245ull;  // "PRE"
    return def;
}

// ---- persistence ----

void save_corpus(const std::string& path, const std::vector<Sequence>& sequences) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StateError("save_corpus: cannot open '" + path + "'");
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        for (const auto& r : sequences[s].records) {
            nlohmann::json j;
            j["task"] = r.task;
            j["seq"] = s;
            j["pos"] = r.position;
            j["tok"] = r.token;
            j["comp"] = {r.composition.y[0], r.composition.y[1], r.composition.y[2],
                         r.composition.y[3]};
            out << j.dump() << '\n';
        }
    }
}

std::vector<Sequence> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StateError("load_corpus: cannot open '" + path + "'");
    std::vector<Sequence> sequences;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const auto seq_idx = j.at("seq").get<std::size_t>();
        if (seq_idx >= sequences.size()) sequences.resize(seq_idx + 1);
        TokenRecord r;
        r.task = j.at("task").get<std::int64_t>();
        r.position = j.at("pos").get<std::int64_t>();
        r.token = j.at("tok").get<std::int64_t>();
        const auto& comp = j.at("comp");
        for (std::size_t i = 0; i < 4; ++i) r.composition.y[i] = comp.at(i).get<std::int16_t>();
        sequences[seq_idx].tokens.push_back(r.token);
        sequences[seq_idx].records.push_back(r);
    }
    return sequences;
}

void save_manifest(const std::string& path, const FeatureSpec& spec, std::uint64_t seed,
                   const CorpusStats& stats) {
    nlohmann::json j;
    j["spec_hash"] = spec.hash();
    j["seed"] = seed;
    j["counts"] = stats.counts;
    j["freq_bucket"] = stats.freq_bucket;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StateError("save_manifest: cannot open '" + path + "'");
    out << j.dump(2) << '\n';
}

CorpusStats load_manifest(const std::string& path, const FeatureSpec& expected_spec) {
    std::ifstream in(path);
    if (!in) throw StateError("load_manifest: cannot open '" + path + "'");
    nlohmann::json j;
    in >> j;
    if (j.at("spec_hash").get<std::uint64_t>() != expected_spec.hash())
        throw ConfigError("load_manifest: manifest was built from a different feature spec");
    CorpusStats stats;
    stats.counts = j.at("counts").get<std::vector<std::int64_t>>();
    stats.freq_bucket = j.at("freq_bucket").get<std::vector<std::int16_t>>();
    stats.frozen = true;
    return stats;
}

}  // namespace mfl
