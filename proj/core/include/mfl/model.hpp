#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mfl/optim.hpp"
#include "mfl/rng.hpp"
#include "mfl/tensor.hpp"

namespace mfl {

// Per-token routing decision: selected expert sets and gate weights per
// routing head. Standard MoE uses a single head. Expert sets are kept
// canonical (ascending expert index).
struct TokenRouting {
    std::vector<std::vector<std::int64_t>> sets;   // [heads][k]
    std::vector<std::vector<double>> gates;        // [heads][k]
};

using RoutingTrace = std::vector<TokenRouting>;  // one entry per position

// Multi-head self-attention with per-head Q/K/V projections, a shared
// output projection (no biases) and a residual connection. The output is
// assembled as residual + sum of per-head post-projection contributions;
// those blocks (plus the residual stream) form the exact additive
// decomposition used as the ablation site by the probing analysis.
class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(std::int64_t n_heads, std::int64_t d_model, bool causal, Rng& rng);

    struct Output {
        Tensor h;                           // [T, d], residual + head contributions
        std::vector<Tensor> head_blocks;    // pre-projection slices, each [T, d/H] (detached)
        std::vector<Tensor> contributions;  // post-projection, each [T, d] (detached)
        Tensor residual;                    // the input stream block [T, d] (detached)
    };

    Output forward(const Tensor& x, bool keep_head_data = false) const;

    std::int64_t n_heads() const { return n_heads_; }
    std::int64_t d_model() const { return d_model_; }
    std::int64_t head_dim() const { return d_model_ / n_heads_; }
    void collect_params(const std::string& prefix, ParamList& out);

private:
    std::int64_t n_heads_ = 0;
    std::int64_t d_model_ = 0;
    bool causal_ = true;
    std::vector<Tensor> wq_, wk_, wv_;  // per head [d, d/H]
    Tensor wo_;                         // [d, d]
    mutable Tensor mask_cache_;         // cached [T, T] additive causal mask
};

// Two-layer gelu MLP; the building block behind every expert.
class ExpertMlp {
public:
    ExpertMlp() = default;
    ExpertMlp(std::int64_t d_in, std::int64_t d_hidden, std::int64_t d_out, Rng& rng);

    Tensor forward(const Tensor& x) const;  // [N, d_in] -> [N, d_out]
    std::int64_t param_count() const;
    void collect_params(const std::string& prefix, ParamList& out);

    std::int64_t d_in() const { return d_in_; }
    std::int64_t d_out() const { return d_out_; }

private:
    std::int64_t d_in_ = 0, d_hidden_ = 0, d_out_ = 0;
    Tensor w1_, b1_, w2_, b2_;
};

struct MoeForward {
    Tensor y;            // [T, d]
    RoutingTrace trace;  // per-token selected sets + gates
};

// Sparse MoE with a single router over the full representation.
class StandardMoeLayer {
public:
    StandardMoeLayer() = default;
    StandardMoeLayer(std::int64_t n_experts, std::int64_t top_k, std::int64_t d_model,
                     std::int64_t expert_hidden, Rng& rng);

    MoeForward forward(const Tensor& h) const;

    std::int64_t n_experts() const { return n_experts_; }
    std::int64_t top_k() const { return top_k_; }
    std::int64_t routing_heads() const { return 1; }
    std::int64_t activated_params_per_token() const;
    void collect_params(const std::string& prefix, ParamList& out);

private:
    std::int64_t n_experts_ = 0, top_k_ = 0, d_model_ = 0;
    Tensor router_;                  // [K, d]
    std::vector<ExpertMlp> experts_; // K experts, d -> d
};

// Head-wise MoE: the representation is split into H contiguous slices;
// each head routes its slice through a private expert bank producing full
// d-dimensional outputs, and head outputs are summed.
class MhMoeLayer {
public:
    MhMoeLayer() = default;
    MhMoeLayer(std::int64_t n_heads, std::int64_t n_experts, std::int64_t top_k,
               std::int64_t d_model, std::int64_t expert_hidden, Rng& rng);

    MoeForward forward(const Tensor& h) const;

    // Replays a frozen routing decision on a single representation [d];
    // matches the live forward for the token that produced the decision.
    Tensor composite_apply(const TokenRouting& routing, const Tensor& h) const;

    std::int64_t routing_heads() const { return n_heads_; }
    std::int64_t n_experts() const { return n_experts_; }
    std::int64_t top_k() const { return top_k_; }
    std::int64_t activated_params_per_token() const;
    void collect_params(const std::string& prefix, ParamList& out);

private:
    std::int64_t n_heads_ = 0, n_experts_ = 0, top_k_ = 0, d_model_ = 0;
    std::vector<Tensor> routers_;                 // per head [K, d/H]
    std::vector<std::vector<ExpertMlp>> banks_;   // per head, K experts d/H -> d
};

// Deterministic top-k selection: by logit descending, ties broken by lowest
// expert index. Returns ascending expert indices.
std::vector<std::int64_t> top_k_select(std::span<const double> logits, std::int64_t k);

// Number of distinct routing outcomes C(K, k)^H; throws ValueError when the
// exact value exceeds the 64-bit range.
std::uint64_t count_route_space(std::int64_t n_experts, std::int64_t top_k, std::int64_t heads);

enum class MoeKind { Standard, MultiHead };

struct ToyLmConfig {
    std::int64_t vocab = 512;
    std::int64_t d_model = 64;
    std::int64_t attn_heads = 4;
    std::int64_t max_seq = 64;
    MoeKind moe_kind = MoeKind::MultiHead;
    std::int64_t moe_heads = 8;       // ignored for Standard
    std::int64_t n_experts = 4;
    std::int64_t top_k = 1;
    std::int64_t expert_hidden = 0;   // 0 -> 2 * expert input width
    bool freeze_backbone = false;
    std::uint64_t init_seed = 0;
};

struct LmForward {
    Tensor logits;        // [T, vocab]
    Tensor router_input;  // detached [T, d]
    RoutingTrace trace;
};

struct LmLoss {
    Tensor loss;                          // scalar, mean over positions
    std::vector<double> per_token;        // [T-1]
    RoutingTrace trace;                   // [T] routing decisions
};

// Embedding -> one attention block -> MoE block (residual) -> unembedding.
class ToyLm {
public:
    ToyLm() = default;
    explicit ToyLm(const ToyLmConfig& cfg);

    LmForward forward(std::span<const std::int64_t> tokens, bool keep_router_input = false) const;
    LmLoss lm_loss(std::span<const std::int64_t> tokens) const;

    // Attention internals for the probing pipeline.
    AttentionBlock::Output attention_output(std::span<const std::int64_t> tokens) const;

    const ToyLmConfig& config() const { return cfg_; }
    ParamList& params() { return params_; }
    const ParamList& params() const { return params_; }
    ParamList trainable_params() const;
    ParamList block_params(const std::string& prefix) const;  // name-prefix match
    void set_freeze_backbone(bool freeze);
    void load_params(const ParamList& source);  // by name, shapes must match

    std::int64_t activated_params_per_token() const;
    const MhMoeLayer* mh_moe() const { return std::get_if<MhMoeLayer>(&moe_); }
    const StandardMoeLayer* standard_moe() const { return std::get_if<StandardMoeLayer>(&moe_); }

private:
    Tensor embed(std::span<const std::int64_t> tokens) const;

    ToyLmConfig cfg_;
    Tensor tok_emb_, pos_emb_, unembed_;
    AttentionBlock attn_;
    std::variant<std::monostate, StandardMoeLayer, MhMoeLayer> moe_;
    ParamList params_;  // stable name -> tensor handles (shared with modules)
};

}  // namespace mfl
