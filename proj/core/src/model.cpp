#include "mfl/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mfl/error.hpp"

namespace mfl {

namespace {

constexpr double kMaskValue = -1e30;

std::vector<std::int64_t> iota_ids(std::int64_t n) {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

// Shared sparse dispatch: given per-token selected sets and the restricted
// softmax gates, apply each expert to its token rows and accumulate.
Tensor apply_selected_experts(const Tensor& x, const Tensor& alpha,
                              const std::vector<std::vector<std::int64_t>>& sets,
                              const std::vector<ExpertMlp>& experts, std::int64_t t_total) {
    const auto n_experts = static_cast<std::int64_t>(experts.size());
    Tensor y;
    for (std::int64_t e = 0; e < n_experts; ++e) {
        std::vector<std::int64_t> rows, slots;
        for (std::int64_t t = 0; t < t_total; ++t) {
            const auto& s = sets[static_cast<std::size_t>(t)];
            for (std::size_t j = 0; j < s.size(); ++j) {
                if (s[j] == e) {
                    rows.push_back(t);
                    slots.push_back(static_cast<std::int64_t>(j));
                }
            }
        }
        if (rows.empty()) continue;
        Tensor xe = take_rows(x, rows);
        Tensor ye = experts[static_cast<std::size_t>(e)].forward(xe);
        Tensor ge = gather_cols(take_rows(alpha, rows), slots, 1);
        Tensor contribution = scatter_rows(scale_rows(ye, ge), rows, t_total);
        y = y.defined() ? add(y, contribution) : contribution;
    }
    return y;
}

}  // namespace

// ---- AttentionBlock ----

AttentionBlock::AttentionBlock(std::int64_t n_heads, std::int64_t d_model, bool causal, Rng& rng)
    : n_heads_(n_heads), d_model_(d_model), causal_(causal) {
    if (n_heads <= 0 || d_model <= 0 || d_model % n_heads != 0)
        throw ConfigError("attention: head count must divide model width (" + std::to_string(n_heads) +
                          " vs " + std::to_string(d_model) + ")");
    const std::int64_t dh = d_model / n_heads;
    for (std::int64_t m = 0; m < n_heads; ++m) {
        wq_.push_back(Tensor::glorot_uniform({d_model, dh}, rng));
        wk_.push_back(Tensor::glorot_uniform({d_model, dh}, rng));
        wv_.push_back(Tensor::glorot_uniform({d_model, dh}, rng));
    }
    wo_ = Tensor::glorot_uniform({d_model, d_model}, rng);
}

AttentionBlock::Output AttentionBlock::forward(const Tensor& x, bool keep_head_data) const {
    if (x.ndim() != 2 || x.dim(1) != d_model_)
        throw ShapeError("attention: expected [T, " + std::to_string(d_model_) + "], got " +
                         shape_str(x.shape()));
    const std::int64_t t_len = x.dim(0);
    const std::int64_t dh = head_dim();

    if (causal_ && (!mask_cache_.defined() || mask_cache_.dim(0) != t_len)) {
        std::vector<double> m(static_cast<std::size_t>(t_len * t_len), 0.0);
        for (std::int64_t i = 0; i < t_len; ++i)
            for (std::int64_t j = i + 1; j < t_len; ++j) m[static_cast<std::size_t>(i * t_len + j)] = kMaskValue;
        mask_cache_ = Tensor::from_data({t_len, t_len}, std::move(m));
    }

    Output out;
    out.h = x;  // residual stream
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::int64_t m = 0; m < n_heads_; ++m) {
        const auto mi = static_cast<std::size_t>(m);
        Tensor q = matmul(x, wq_[mi]);
        Tensor k = matmul(x, wk_[mi]);
        Tensor v = matmul(x, wv_[mi]);
        Tensor scores = scale(matmul_nt(q, k), inv_sqrt_dh);
        if (causal_) scores = add(scores, mask_cache_);
        Tensor attn = softmax(scores, 1);
        Tensor head = matmul(attn, v);  // [T, dh]

        std::vector<std::int64_t> rows(static_cast<std::size_t>(dh));
        std::iota(rows.begin(), rows.end(), m * dh);
        Tensor contribution = matmul(head, take_rows(wo_, rows));  // [T, d]

        out.h = add(out.h, contribution);
        if (keep_head_data) {
            out.head_blocks.push_back(head.detach());
            out.contributions.push_back(contribution.detach());
        }
    }
    if (keep_head_data) out.residual = x.detach();
    return out;
}

void AttentionBlock::collect_params(const std::string& prefix, ParamList& out) {
    for (std::int64_t m = 0; m < n_heads_; ++m) {
        const auto mi = static_cast<std::size_t>(m);
        const std::string base = prefix + ".h" + std::to_string(m);
        out.push_back({base + ".wq", wq_[mi]});
        out.push_back({base + ".wk", wk_[mi]});
        out.push_back({base + ".wv", wv_[mi]});
    }
    out.push_back({prefix + ".wo", wo_});
}

// ---- ExpertMlp ----

ExpertMlp::ExpertMlp(std::int64_t d_in, std::int64_t d_hidden, std::int64_t d_out, Rng& rng)
    : d_in_(d_in), d_hidden_(d_hidden), d_out_(d_out) {
    if (d_in <= 0 || d_hidden <= 0 || d_out <= 0) throw ConfigError("expert: widths must be positive");
    w1_ = Tensor::glorot_uniform({d_in, d_hidden}, rng);
    b1_ = Tensor::zeros({d_hidden});
    w2_ = Tensor::glorot_uniform({d_hidden, d_out}, rng);
    b2_ = Tensor::zeros({d_out});
}

Tensor ExpertMlp::forward(const Tensor& x) const {
    return add_bias(matmul(gelu(add_bias(matmul(x, w1_), b1_)), w2_), b2_);
}

std::int64_t ExpertMlp::param_count() const {
    return d_in_ * d_hidden_ + d_hidden_ + d_hidden_ * d_out_ + d_out_;
}

void ExpertMlp::collect_params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w1", w1_});
    out.push_back({prefix + ".b1", b1_});
    out.push_back({prefix + ".w2", w2_});
    out.push_back({prefix + ".b2", b2_});
}

// ---- routing helpers ----

std::vector<std::int64_t> top_k_select(std::span<const double> logits, std::int64_t k) {
    const auto n = static_cast<std::int64_t>(logits.size());
    if (k <= 0 || k > n) throw ConfigError("top_k_select: k must be in [1, K]");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        const double la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
        if (la != lb) return la > lb;
        return a < b;  // ties: lowest expert index wins
    });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::uint64_t count_route_space(std::int64_t n_experts, std::int64_t top_k, std::int64_t heads) {
    if (heads < 1) throw ConfigError("count_route_space: heads must be >= 1");
    if (top_k < 0 || top_k > n_experts || n_experts < 1)
        throw ConfigError("count_route_space: need 0 <= k <= K, K >= 1");
    unsigned __int128 choose = 1;
    for (std::int64_t i = 0; i < top_k; ++i) {
        choose = choose * static_cast<unsigned __int128>(n_experts - i);
        choose /= static_cast<unsigned __int128>(i + 1);
        if (choose > UINT64_MAX) throw ValueError("count_route_space: C(K, k) exceeds 64-bit range");
    }
    unsigned __int128 total = 1;
    for (std::int64_t h = 0; h < heads; ++h) {
        total *= choose;
        if (total > UINT64_MAX)
            throw ValueError("count_route_space: C(K, k)^H exceeds 64-bit range");
    }
    return static_cast<std::uint64_t>(total);
}

// ---- StandardMoeLayer ----

StandardMoeLayer::StandardMoeLayer(std::int64_t n_experts, std::int64_t top_k, std::int64_t d_model,
                                   std::int64_t expert_hidden, Rng& rng)
    : n_experts_(n_experts), top_k_(top_k), d_model_(d_model) {
    if (n_experts <= 0) throw ConfigError("moe: need at least one expert");
    if (top_k <= 0 || top_k > n_experts) throw ConfigError("moe: top-k must be in [1, K]");
    router_ = Tensor::glorot_uniform({n_experts, d_model}, rng);
    const std::int64_t hidden = expert_hidden > 0 ? expert_hidden : 2 * d_model;
    for (std::int64_t e = 0; e < n_experts; ++e)
        experts_.emplace_back(d_model, hidden, d_model, rng);
}

MoeForward StandardMoeLayer::forward(const Tensor& h) const {
    if (h.ndim() != 2 || h.dim(1) != d_model_)
        throw ShapeError("moe: expected [T, " + std::to_string(d_model_) + "], got " + shape_str(h.shape()));
    const std::int64_t t_len = h.dim(0);

    Tensor logits = matmul_nt(h, router_);  // [T, K]
    std::vector<std::vector<std::int64_t>> sets(static_cast<std::size_t>(t_len));
    std::vector<std::int64_t> flat;
    flat.reserve(static_cast<std::size_t>(t_len * top_k_));
    for (std::int64_t t = 0; t < t_len; ++t) {
        auto row = logits.data().subspan(static_cast<std::size_t>(t * n_experts_),
                                         static_cast<std::size_t>(n_experts_));
        sets[static_cast<std::size_t>(t)] = top_k_select(row, top_k_);
        for (const auto e : sets[static_cast<std::size_t>(t)]) flat.push_back(e);
    }
    Tensor alpha = softmax(gather_cols(logits, flat, top_k_), 1);  // [T, k]

    MoeForward out;
    out.y = apply_selected_experts(h, alpha, sets, experts_, t_len);
    out.trace.resize(static_cast<std::size_t>(t_len));
    for (std::int64_t t = 0; t < t_len; ++t) {
        auto& rec = out.trace[static_cast<std::size_t>(t)];
        rec.sets = {sets[static_cast<std::size_t>(t)]};
        std::vector<double> g(static_cast<std::size_t>(top_k_));
        for (std::int64_t j = 0; j < top_k_; ++j) g[static_cast<std::size_t>(j)] = alpha.at(t, j);
        rec.gates = {std::move(g)};
    }
    return out;
}

std::int64_t StandardMoeLayer::activated_params_per_token() const {
    return top_k_ * (d_model_ + experts_[0].param_count());
}

void StandardMoeLayer::collect_params(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".router", router_});
    for (std::int64_t e = 0; e < n_experts_; ++e)
        experts_[static_cast<std::size_t>(e)].collect_params(prefix + ".e" + std::to_string(e), out);
}

// ---- MhMoeLayer ----

MhMoeLayer::MhMoeLayer(std::int64_t n_heads, std::int64_t n_experts, std::int64_t top_k,
                       std::int64_t d_model, std::int64_t expert_hidden, Rng& rng)
    : n_heads_(n_heads), n_experts_(n_experts), top_k_(top_k), d_model_(d_model) {
    if (n_heads <= 0 || d_model % n_heads != 0)
        throw ConfigError("mh-moe: head count must divide model width (" + std::to_string(n_heads) +
                          " vs " + std::to_string(d_model) + ")");
    if (n_experts <= 0) throw ConfigError("mh-moe: need at least one expert per bank");
    if (top_k <= 0 || top_k > n_experts) throw ConfigError("mh-moe: top-k must be in [1, K]");
    const std::int64_t dh = d_model / n_heads;
    const std::int64_t hidden = expert_hidden > 0 ? expert_hidden : 2 * dh;
    for (std::int64_t m = 0; m < n_heads; ++m) {
        routers_.push_back(Tensor::glorot_uniform({n_experts, dh}, rng));
        std::vector<ExpertMlp> bank;
        for (std::int64_t e = 0; e < n_experts; ++e) bank.emplace_back(dh, hidden, d_model, rng);
        banks_.push_back(std::move(bank));
    }
}

MoeForward MhMoeLayer::forward(const Tensor& h) const {
    if (h.ndim() != 2 || h.dim(1) != d_model_)
        throw ShapeError("mh-moe: expected [T, " + std::to_string(d_model_) + "], got " + shape_str(h.shape()));
    const std::int64_t t_len = h.dim(0);
    const std::int64_t dh = d_model_ / n_heads_;

    MoeForward out;
    out.trace.resize(static_cast<std::size_t>(t_len));
    for (auto& rec : out.trace) {
        rec.sets.resize(static_cast<std::size_t>(n_heads_));
        rec.gates.resize(static_cast<std::size_t>(n_heads_));
    }

    for (std::int64_t m = 0; m < n_heads_; ++m) {
        const auto mi = static_cast<std::size_t>(m);
        Tensor hm = slice_last(h, m * dh, dh);                 // [T, d/H]
        Tensor logits = matmul_nt(hm, routers_[mi]);           // [T, K]
        std::vector<std::vector<std::int64_t>> sets(static_cast<std::size_t>(t_len));
        std::vector<std::int64_t> flat;
        flat.reserve(static_cast<std::size_t>(t_len * top_k_));
        for (std::int64_t t = 0; t < t_len; ++t) {
            auto row = logits.data().subspan(static_cast<std::size_t>(t * n_experts_),
                                             static_cast<std::size_t>(n_experts_));
            sets[static_cast<std::size_t>(t)] = top_k_select(row, top_k_);
            for (const auto e : sets[static_cast<std::size_t>(t)]) flat.push_back(e);
        }
        Tensor alpha = softmax(gather_cols(logits, flat, top_k_), 1);
        Tensor ym = apply_selected_experts(hm, alpha, sets, banks_[mi], t_len);  // [T, d]
        out.y = out.y.defined() ? add(out.y, ym) : ym;

        for (std::int64_t t = 0; t < t_len; ++t) {
            auto& rec = out.trace[static_cast<std::size_t>(t)];
            rec.sets[mi] = sets[static_cast<std::size_t>(t)];
            std::vector<double> g(static_cast<std::size_t>(top_k_));
            for (std::int64_t j = 0; j < top_k_; ++j) g[static_cast<std::size_t>(j)] = alpha.at(t, j);
            rec.gates[mi] = std::move(g);
        }
    }
    return out;
}

Tensor MhMoeLayer::composite_apply(const TokenRouting& routing, const Tensor& h) const {
    if (h.numel() != d_model_) throw ShapeError("composite_apply: representation width mismatch");
    if (static_cast<std::int64_t>(routing.sets.size()) != n_heads_ ||
        routing.gates.size() != routing.sets.size())
        throw ValueError("composite_apply: routing tuple does not match bank layout");
    const std::int64_t dh = d_model_ / n_heads_;

    NoRecordScope no_record;
    Tensor h_row = Tensor::from_data({1, d_model_}, std::vector<double>(h.data().begin(), h.data().end()));
    std::vector<double> acc(static_cast<std::size_t>(d_model_), 0.0);
    for (std::int64_t m = 0; m < n_heads_; ++m) {
        const auto mi = static_cast<std::size_t>(m);
        const auto& set = routing.sets[mi];
        const auto& gates = routing.gates[mi];
        if (set.size() != gates.size()) throw ValueError("composite_apply: set/gate length mismatch");
        Tensor hm = slice_last(h_row, m * dh, dh);
        for (std::size_t j = 0; j < set.size(); ++j) {
            const std::int64_t e = set[j];
            if (e < 0 || e >= n_experts_) throw ValueError("composite_apply: expert index out of bank");
            Tensor ye = banks_[mi][static_cast<std::size_t>(e)].forward(hm);
            const auto yd = ye.data();
            for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += gates[j] * yd[c];
        }
    }
    return Tensor::from_data({d_model_}, std::move(acc));
}

std::int64_t MhMoeLayer::activated_params_per_token() const {
    const std::int64_t dh = d_model_ / n_heads_;
    return n_heads_ * top_k_ * (dh + banks_[0][0].param_count());
}

void MhMoeLayer::collect_params(const std::string& prefix, ParamList& out) {
    for (std::int64_t m = 0; m < n_heads_; ++m) {
        const std::string base = prefix + ".h" + std::to_string(m);
        out.push_back({base + ".router", routers_[static_cast<std::size_t>(m)]});
        for (std::int64_t e = 0; e < n_experts_; ++e)
            banks_[static_cast<std::size_t>(m)][static_cast<std::size_t>(e)].collect_params(
                base + ".e" + std::to_string(e), out);
    }
}

// ---- ToyLm ----

ToyLm::ToyLm(const ToyLmConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    tok_emb_ = Tensor::glorot_uniform({cfg.vocab, cfg.d_model}, rng);
    pos_emb_ = Tensor::glorot_uniform({cfg.max_seq, cfg.d_model}, rng);
    attn_ = AttentionBlock(cfg.attn_heads, cfg.d_model, /*causal=*/true, rng);
    if (cfg.moe_kind == MoeKind::Standard) {
        moe_ = StandardMoeLayer(cfg.n_experts, cfg.top_k, cfg.d_model, cfg.expert_hidden, rng);
    } else {
        moe_ = MhMoeLayer(cfg.moe_heads, cfg.n_experts, cfg.top_k, cfg.d_model, cfg.expert_hidden, rng);
    }
    unembed_ = Tensor::glorot_uniform({cfg.d_model, cfg.vocab}, rng);

    params_.push_back({"embed.tok", tok_emb_});
    params_.push_back({"embed.pos", pos_emb_});
    attn_.collect_params("attn", params_);
    if (auto* std_moe = std::get_if<StandardMoeLayer>(&moe_)) std_moe->collect_params("moe", params_);
    if (auto* mh = std::get_if<MhMoeLayer>(&moe_)) mh->collect_params("moe", params_);
    params_.push_back({"unembed.w", unembed_});

    for (auto& p : params_) p.tensor.set_requires_grad(true);
    set_freeze_backbone(cfg.freeze_backbone);
}

Tensor ToyLm::embed(std::span<const std::int64_t> tokens) const {
    const auto t_len = static_cast<std::int64_t>(tokens.size());
    if (t_len == 0) throw ValueError("model: empty token sequence");
    if (t_len > cfg_.max_seq)
        throw ConfigError("model: sequence length " + std::to_string(t_len) + " exceeds max_seq " +
                          std::to_string(cfg_.max_seq));
    for (const auto id : tokens)
        if (id < 0 || id >= cfg_.vocab)
            throw IndexError("model: token id " + std::to_string(id) + " out of vocab range [0, " +
                             std::to_string(cfg_.vocab) + ")");
    Tensor tok = embedding_lookup(tok_emb_, tokens);
    Tensor pos = take_rows(pos_emb_, iota_ids(t_len));
    return add(tok, pos);
}

LmForward ToyLm::forward(std::span<const std::int64_t> tokens, bool keep_router_input) const {
    Tensor x = embed(tokens);
    auto attn_out = attn_.forward(x);
    const Tensor& h = attn_out.h;

    MoeForward moe_out = std::visit(
        [&](const auto& layer) -> MoeForward {
            if constexpr (std::is_same_v<std::decay_t<decltype(layer)>, std::monostate>)
                throw StateError("model: MoE block is not initialized");
            else
                return layer.forward(h);
        },
        moe_);

    LmForward out;
    out.logits = matmul(add(h, moe_out.y), unembed_);
    out.trace = std::move(moe_out.trace);
    if (keep_router_input) out.router_input = h.detach();
    return out;
}

LmLoss ToyLm::lm_loss(std::span<const std::int64_t> tokens) const {
    if (tokens.size() < 2) throw ValueError("lm_loss: need at least two tokens");
    LmForward fwd = forward(tokens);
    const auto t_len = static_cast<std::int64_t>(tokens.size());

    std::vector<std::int64_t> pred_rows(static_cast<std::size_t>(t_len - 1));
    std::iota(pred_rows.begin(), pred_rows.end(), 0);
    Tensor pred_logits = take_rows(fwd.logits, pred_rows);
    std::vector<std::int64_t> targets(tokens.begin() + 1, tokens.end());
    Tensor per_row = cross_entropy_per_row(pred_logits, targets);  // [T-1, 1]

    LmLoss out;
    out.loss = mean(per_row);
    out.per_token.assign(per_row.data().begin(), per_row.data().end());
    out.trace = std::move(fwd.trace);
    return out;
}

AttentionBlock::Output ToyLm::attention_output(std::span<const std::int64_t> tokens) const {
    NoRecordScope no_record;
    Tensor x = embed(tokens);
    return attn_.forward(x, /*keep_head_data=*/true);
}

ParamList ToyLm::trainable_params() const {
    ParamList out;
    for (const auto& p : params_)
        if (p.tensor.requires_grad()) out.push_back(p);
    return out;
}

ParamList ToyLm::block_params(const std::string& prefix) const {
    ParamList out;
    for (const auto& p : params_)
        if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
    if (out.empty()) throw ValueError("block_params: unknown parameter block '" + prefix + "'");
    return out;
}

void ToyLm::set_freeze_backbone(bool freeze) {
    cfg_.freeze_backbone = freeze;
    for (auto& p : params_) {
        const bool is_moe = p.name.rfind("moe.", 0) == 0;
        p.tensor.set_requires_grad(is_moe || !freeze);
    }
}

void ToyLm::load_params(const ParamList& source) {
    for (auto& p : params_) {
        const NamedParam* found = nullptr;
        for (const auto& s : source)
            if (s.name == p.name) {
                found = &s;
                break;
            }
        if (found == nullptr) throw ValueError("load_params: missing parameter '" + p.name + "'");
        if (found->tensor.shape() != p.tensor.shape())
            throw ShapeError("load_params: shape mismatch for '" + p.name + "'");
        auto dst = p.tensor.mutable_data();
        const auto src = found->tensor.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

std::int64_t ToyLm::activated_params_per_token() const {
    return std::visit(
        [](const auto& layer) -> std::int64_t {
            if constexpr (std::is_same_v<std::decay_t<decltype(layer)>, std::monostate>)
                throw StateError("model: MoE block is not initialized");
            else
                return layer.activated_params_per_token();
        },
        moe_);
}

}  // namespace mfl
