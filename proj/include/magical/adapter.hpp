// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters over frozen projections.
//
//   LoRA:        y = W0 x + B A x
//   Asymmetric:  y = W0 x + Σ_i α_i B_i A x      (one shared A, N branches B_i)
//   Multi-LoRA:  y = W0 x + Σ_i α_i B_i A_i x    (N independent pairs)
//
// A is r×k, B is d×r, W0 is d×k. A starts Gaussian (std 0.02) and every B
// starts at zero, so a freshly attached model reproduces its base exactly.
// No α_lora/r scaling is applied; the branch weights are the only scale.

#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "magical/model.hpp"
#include "magical/random.hpp"
#include "magical/switch_control.hpp"
#include "magical/tensor.hpp"

namespace magical {

inline constexpr double kAdapterInitStd = 0.02;

namespace detail {

// Views a [k] vector as a 1×k row; matrices pass through.
inline Tensor as_rows(const Tensor& x) { return x.rank() == 1 ? reshape(x, {1, x.size()}) : x; }

inline Tensor restore_rank(const Tensor& y, const Tensor& like) {
    return like.rank() == 1 ? reshape(y, {y.size()}) : y;
}

inline void require_frozen(const Tensor& w0) {
    if (w0.requires_grad()) throw ContractError("base weight W0 must be frozen (requires_grad = false)");
}

inline Tensor alpha_component(const Tensor& alpha, std::size_t i) {
    return slice_cols(reshape(alpha, {1, alpha.size()}), i, 1);
}

}  // namespace detail

struct LoraPair {
    Tensor A;  // r × k
    Tensor B;  // d × r
    std::size_t rank = 0;

    static LoraPair create(std::size_t d, std::size_t k, std::size_t r, Rng& rng) {
        if (r < 1 || r >= std::min(d, k)) {
            throw ConfigurationError("LoRA rank " + std::to_string(r) + " must be below min(d, k) = " +
                                     std::to_string(std::min(d, k)));
        }
        LoraPair p{rng.gaussian({r, k}, kAdapterInitStd), Tensor::zeros({d, r}), r};
        p.validate();
        p.A.set_requires_grad(true);
        p.B.set_requires_grad(true);
        return p;
    }

    std::size_t out_dim() const { return B.dim(0); }
    std::size_t in_dim() const { return A.dim(1); }

    void validate() const {
        if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != rank || B.dim(1) != rank) {
            throw DimensionError("LoRA pair: A " + shape_str(A.shape()) + " and B " + shape_str(B.shape()) +
                                 " disagree with rank " + std::to_string(rank));
        }
        if (rank < 1 || rank >= std::min(out_dim(), in_dim())) {
            throw ConfigurationError("LoRA rank " + std::to_string(rank) + " must be below min(d, k) = " +
                                     std::to_string(std::min(out_dim(), in_dim())));
        }
    }

    /// B A x for rows of x.
    Tensor delta(const Tensor& x) const { return matmul_nt(matmul_nt(x, A), B); }
};

inline Tensor lora_forward(const Tensor& x, const Tensor& w0, const LoraPair& pair) {
    detail::require_frozen(w0);
    const Tensor rows = detail::as_rows(x);
    if (w0.rank() != 2 || rows.dim(1) != w0.dim(1) || pair.in_dim() != w0.dim(1) || pair.out_dim() != w0.dim(0)) {
        throw DimensionError("lora_forward: x " + shape_str(x.shape()) + ", W0 " + shape_str(w0.shape()) + ", A " +
                             shape_str(pair.A.shape()) + ", B " + shape_str(pair.B.shape()));
    }
    return detail::restore_rank(add(matmul_nt(rows, w0), pair.delta(rows)), x);
}

class AsymmetricAdapter {
public:
    AsymmetricAdapter(Tensor shared, std::vector<Tensor> branches, BranchControl control)
        : shared_(std::move(shared)), branches_(std::move(branches)), control_(std::move(control)) {
        if (branches_.empty()) throw ConfigurationError("asymmetric adapter needs at least one branch");
        if (shared_.rank() != 2) throw DimensionError("shared projection must be a matrix");
        const std::size_t r = shared_.dim(0);
        const std::size_t d = branches_[0].rank() == 2 ? branches_[0].dim(0) : 0;
        for (const auto& b : branches_) {
            if (b.rank() != 2 || b.dim(0) != d || b.dim(1) != r) {
                throw DimensionError("branch " + shape_str(b.shape()) + " inconsistent with shared projection " +
                                     shape_str(shared_.shape()));
            }
        }
        if (control_.branches() != branches_.size()) {
            throw ControlError("control has " + std::to_string(control_.branches()) + " weights for " +
                               std::to_string(branches_.size()) + " branches");
        }
    }

    static AsymmetricAdapter create(std::size_t d, std::size_t k, std::size_t r, std::size_t n, Rng& rng) {
        if (r < 1 || r >= std::min(d, k)) {
            throw ConfigurationError("adapter rank " + std::to_string(r) + " must be below min(d, k) = " +
                                     std::to_string(std::min(d, k)));
        }
        Tensor a = rng.gaussian({r, k}, kAdapterInitStd);
        a.set_requires_grad(true);
        std::vector<Tensor> bs;
        for (std::size_t i = 0; i < n; ++i) bs.push_back(Tensor::zeros({d, r}).set_requires_grad(true));
        return AsymmetricAdapter(std::move(a), std::move(bs), BranchControl::switch_to(0, n));
    }

    const Tensor& shared_projection() const { return shared_; }
    const std::vector<Tensor>& branches() const { return branches_; }
    std::vector<Tensor>& branches() { return branches_; }
    const BranchControl& control() const { return control_; }
    BranchControl& control() { return control_; }

    std::size_t rank() const { return shared_.dim(0); }
    std::size_t in_dim() const { return shared_.dim(1); }
    std::size_t out_dim() const { return branches_[0].dim(0); }
    std::size_t size() const { return branches_.size(); }

    /// Σ α_i B_i (A x) for rows of x. The shared projection is computed once;
    /// branches with α_i = 0 are skipped. Undefined when every α_i is zero.
    Tensor delta(const Tensor& rows, std::span<const double> alpha) const {
        Tensor z = matmul_nt(rows, shared_);
        Tensor out;
        for (std::size_t i = 0; i < branches_.size(); ++i) {
            if (alpha[i] == 0.0) continue;
            Tensor term = matmul_nt(z, branches_[i]);
            if (alpha[i] != 1.0) term = scale(term, alpha[i]);
            out = out.defined() ? add(out, term) : term;
        }
        return out;
    }

    /// Same with differentiable branch weights (router mode).
    Tensor delta(const Tensor& rows, const Tensor& alpha) const {
        if (alpha.size() != branches_.size()) throw ControlError("alpha size differs from branch count");
        Tensor z = matmul_nt(rows, shared_);
        Tensor out;
        for (std::size_t i = 0; i < branches_.size(); ++i) {
            Tensor term = scale(matmul_nt(z, branches_[i]), detail::alpha_component(alpha, i));
            out = out.defined() ? add(out, term) : term;
        }
        return out;
    }

private:
    Tensor shared_;
    std::vector<Tensor> branches_;
    BranchControl control_;
};

inline void check_simplex(const Tensor& alpha) {
    double s = 0.0;
    for (double a : alpha.data()) {
        if (!(a >= 0.0)) throw ControlError("router alpha must be non-negative");
        s += a;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ControlError("router alpha must sum to 1");
}

/// y = W0 x + Σ α_i B_i A x using the adapter's own control.
inline Tensor magical_forward(const Tensor& x, const Tensor& w0, const AsymmetricAdapter& adapter) {
    detail::require_frozen(w0);
    adapter.control().validate();
    const Tensor rows = detail::as_rows(x);
    if (w0.rank() != 2 || rows.dim(1) != w0.dim(1) || adapter.in_dim() != w0.dim(1) ||
        adapter.out_dim() != w0.dim(0)) {
        throw DimensionError("magical_forward: x " + shape_str(x.shape()) + ", W0 " + shape_str(w0.shape()) +
                             ", A " + shape_str(adapter.shared_projection().shape()));
    }
    Tensor y = matmul_nt(rows, w0);
    Tensor d = adapter.delta(rows, adapter.control().alpha);
    return detail::restore_rank(d.defined() ? add(y, d) : y, x);
}

/// Router-mode variant with differentiable α on the simplex.
inline Tensor magical_forward(const Tensor& x, const Tensor& w0, const AsymmetricAdapter& adapter,
                              const Tensor& alpha) {
    detail::require_frozen(w0);
    check_simplex(alpha);
    const Tensor rows = detail::as_rows(x);
    if (w0.rank() != 2 || rows.dim(1) != w0.dim(1) || adapter.in_dim() != w0.dim(1) ||
        adapter.out_dim() != w0.dim(0)) {
        throw DimensionError("magical_forward: x " + shape_str(x.shape()) + ", W0 " + shape_str(w0.shape()));
    }
    return detail::restore_rank(add(matmul_nt(rows, w0), adapter.delta(rows, alpha)), x);
}

/// N independent LoRA pairs mixed by α.
struct MultiLora {
    std::vector<LoraPair> pairs;

    Tensor delta(const Tensor& rows, std::span<const double> alpha) const {
        Tensor out;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            if (alpha[i] == 0.0) continue;
            Tensor term = pairs[i].delta(rows);
            if (alpha[i] != 1.0) term = scale(term, alpha[i]);
            out = out.defined() ? add(out, term) : term;
        }
        return out;
    }

    Tensor delta(const Tensor& rows, const Tensor& alpha) const {
        Tensor out;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            Tensor term = scale(pairs[i].delta(rows), detail::alpha_component(alpha, i));
            out = out.defined() ? add(out, term) : term;
        }
        return out;
    }
};

enum class Scheme { Lora, MultiLora, Magical };

inline const char* scheme_name(Scheme s) {
    switch (s) {
        case Scheme::Lora: return "lora";
        case Scheme::MultiLora: return "multi_lora";
        case Scheme::Magical: return "magical";
    }
    return "?";
}

inline Scheme parse_scheme(const std::string& s) {
    if (s == "lora") return Scheme::Lora;
    if (s == "multi_lora") return Scheme::MultiLora;
    if (s == "magical") return Scheme::Magical;
    throw ConfigurationError("unknown adapter scheme '" + s + "' (expected lora, multi_lora or magical)");
}

/// Trainable parameters for `sites` adapted d×k projections. Router gate
/// parameters are not included.
inline std::size_t param_count(std::size_t d, std::size_t k, std::size_t r, std::size_t n, std::size_t sites,
                               Scheme scheme) {
    switch (scheme) {
        case Scheme::Lora: return sites * (r * k + d * r);
        case Scheme::MultiLora: return n * sites * (r * k + d * r);
        case Scheme::Magical: return sites * (r * k + n * d * r);
    }
    return 0;
}

struct AttachSpec {
    std::vector<std::size_t> layers;  // 1-based block indices; empty = every block
    std::vector<SiteKind> sites = {SiteKind::Query, SiteKind::Value, SiteKind::FeedUp, SiteKind::FeedDown};
    std::size_t rank = 4;
    std::size_t branches = 3;
    Scheme scheme = Scheme::Magical;
    ControlMode mode = ControlMode::Switch;
    RouterScope router_scope = RouterScope::Global;
    // Site whose A projects a layer's hidden states for the contrastive term.
    SiteKind contrastive_site = SiteKind::Query;
    std::uint64_t seed = 0;
};

/// Input/output widths of a projection site.
inline std::pair<std::size_t, std::size_t> site_shape(const ModelConfig& cfg, SiteKind s) {
    switch (s) {
        case SiteKind::FeedUp: return {cfg.d_ff, cfg.d_model};
        case SiteKind::FeedDown: return {cfg.d_model, cfg.d_ff};
        default: return {cfg.d_model, cfg.d_model};
    }
}

struct AdapterSite {
    std::size_t layer = 0;
    SiteKind kind = SiteKind::Query;
    std::variant<AsymmetricAdapter, MultiLora> impl;
    std::optional<RouterGate> gate;  // per-site router scope only

    Tensor delta(const Tensor& rows, std::span<const double> alpha) const {
        return std::visit([&](const auto& a) { return a.delta(rows, alpha); }, impl);
    }
    Tensor delta(const Tensor& rows, const Tensor& alpha) const {
        return std::visit([&](const auto& a) { return a.delta(rows, alpha); }, impl);
    }
};

/// A frozen transformer with adapters wrapped around selected projections.
class AdaptedModel {
public:
    AdaptedModel(std::shared_ptr<Transformer> base, AttachSpec spec) : base_(std::move(base)), spec_(std::move(spec)) {
        const auto& cfg = base_->config();
        base_->set_trainable(false);
        if (spec_.sites.empty()) throw ConfigurationError("attach: empty site pattern matches no projection");
        if (spec_.layers.empty()) {
            for (std::size_t l = 1; l <= cfg.n_layers; ++l) spec_.layers.push_back(l);
        }
        for (auto l : spec_.layers) {
            if (l < 1 || l > cfg.n_layers) {
                throw ConfigurationError("attach: layer " + std::to_string(l) + " does not exist (model has " +
                                         std::to_string(cfg.n_layers) + " blocks)");
            }
        }
        if (spec_.branches < 1) throw ConfigurationError("attach: at least one branch required");
        if (spec_.scheme == Scheme::Lora && spec_.branches != 1) {
            throw ConfigurationError("attach: the lora scheme has exactly one branch");
        }
        if (spec_.mode == ControlMode::Off) throw ConfigurationError("attach: control mode must be switch or router");

        Rng rng(derive_seed(spec_.seed, 0xADA));
        index_.assign(cfg.n_layers + 1, std::vector<std::ptrdiff_t>(kAllSites.size(), -1));
        for (auto l : spec_.layers) {
            for (auto s : spec_.sites) {
                if (index_[l][static_cast<std::size_t>(s)] >= 0) continue;
                const auto [d, k] = site_shape(cfg, s);
                auto make_impl = [&, d = d, k = k]() -> std::variant<AsymmetricAdapter, MultiLora> {
                    if (spec_.scheme != Scheme::MultiLora) {
                        return AsymmetricAdapter::create(d, k, spec_.rank, spec_.branches, rng);
                    }
                    MultiLora ml;
                    for (std::size_t i = 0; i < spec_.branches; ++i)
                        ml.pairs.push_back(LoraPair::create(d, k, spec_.rank, rng));
                    return ml;
                };
                AdapterSite site{l, s, make_impl(), std::nullopt};
                if (spec_.mode == ControlMode::Router && spec_.router_scope == RouterScope::PerSite) {
                    site.gate = RouterGate::create(spec_.branches, cfg.d_model, rng, RouterScope::PerSite);
                }
                index_[l][static_cast<std::size_t>(s)] = static_cast<std::ptrdiff_t>(sites_.size());
                sites_.push_back(std::move(site));
            }
        }
        if (spec_.mode == ControlMode::Router && spec_.router_scope == RouterScope::Global) {
            gate_ = RouterGate::create(spec_.branches, cfg.d_model, rng, RouterScope::Global);
        }
        for (auto& p : trainable_parameters()) p.tensor.set_requires_grad(true);
    }

    const Transformer& base() const { return *base_; }
    std::shared_ptr<Transformer> base_ptr() const { return base_; }
    const AttachSpec& spec() const { return spec_; }
    std::size_t branches() const { return spec_.branches; }
    const std::vector<AdapterSite>& sites() const { return sites_; }
    std::vector<AdapterSite>& sites() { return sites_; }
    const std::optional<RouterGate>& gate() const { return gate_; }

    const AdapterSite* site(std::size_t layer, SiteKind kind) const {
        if (layer >= index_.size()) return nullptr;
        const auto i = index_[layer][static_cast<std::size_t>(kind)];
        return i < 0 ? nullptr : &sites_[static_cast<std::size_t>(i)];
    }

    /// A of the contrastive site at `layer` (branch-specific under multi_lora).
    const Tensor& projection(std::size_t layer, std::size_t branch = 0) const {
        const auto* s = site(layer, spec_.contrastive_site);
        if (!s) {
            throw ConfigurationError("no adapter on site '" + std::string(site_name(spec_.contrastive_site)) +
                                     "' of layer " + std::to_string(layer));
        }
        if (const auto* a = std::get_if<AsymmetricAdapter>(&s->impl)) return a->shared_projection();
        return std::get<MultiLora>(s->impl).pairs.at(branch).A;
    }

    /// Named trainables: A, every B, and router gates. Names carry the site
    /// and branch index so checkpoints are self-describing.
    std::vector<NamedTensor> trainable_parameters() const {
        std::vector<NamedTensor> out;
        for (const auto& s : sites_) {
            const auto p = "adapter.L" + std::to_string(s.layer) + "." + site_name(s.kind) + ".";
            if (const auto* a = std::get_if<AsymmetricAdapter>(&s.impl)) {
                out.push_back({p + "A", a->shared_projection()});
                for (std::size_t i = 0; i < a->branches().size(); ++i)
                    out.push_back({p + "B" + std::to_string(i), a->branches()[i]});
            } else {
                const auto& ml = std::get<MultiLora>(s.impl);
                for (std::size_t i = 0; i < ml.pairs.size(); ++i) {
                    out.push_back({p + "A" + std::to_string(i), ml.pairs[i].A});
                    out.push_back({p + "B" + std::to_string(i), ml.pairs[i].B});
                }
            }
            if (s.gate) {
                out.push_back({p + "router.weight", s.gate->weight});
                out.push_back({p + "router.bias", s.gate->bias});
            }
        }
        if (gate_) {
            out.push_back({"router.weight", gate_->weight});
            out.push_back({"router.bias", gate_->bias});
        }
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : trainable_parameters()) n += p.tensor.size();
        return n;
    }

    /// Router α per gate (one for a global gate, one per site otherwise),
    /// from the mean layer-0 hidden state of the expert tokens.
    std::vector<Tensor> router_alphas(std::span<const TokenId> expert_tokens) const {
        if (spec_.mode != ControlMode::Router) throw ControlError("router_alphas on a switch-controlled adapter");
        Tensor pooled = pooled_embedding(expert_tokens);
        std::vector<Tensor> out;
        if (gate_) {
            out.push_back(router_alpha(*gate_, pooled));
        } else {
            for (const auto& s : sites_) out.push_back(router_alpha(*s.gate, pooled));
        }
        return out;
    }

    Tensor pooled_embedding(std::span<const TokenId> tokens) const {
        base_->check_tokens(tokens);
        std::vector<std::size_t> positions(tokens.size());
        std::iota(positions.begin(), positions.end(), std::size_t{0});
        Tensor h = add(embedding(base_->token_embedding(), tokens), embedding(base_->position_embedding(), positions));
        return mean_rows(h);
    }

    ForwardResult forward(std::span<const TokenId> tokens, const BranchControl& control,
                          bool with_logits = true) const {
        control.validate();
        if (control.branches() != spec_.branches) throw ControlError("control width differs from branch count");
        ControlHook hook(*this, &control.alpha, {});
        return base_->forward(tokens, &hook, with_logits);
    }

    ForwardResult forward(std::span<const TokenId> tokens, std::span<const Tensor> alphas,
                          bool with_logits = true) const {
        for (const auto& a : alphas) check_simplex(a);
        ControlHook hook(*this, nullptr, alphas);
        return base_->forward(tokens, &hook, with_logits);
    }

    std::vector<TokenId> generate(std::span<const TokenId> prompt, std::size_t max_new, std::optional<TokenId> eos,
                                  const BranchControl& control) const {
        control.validate();
        ControlHook hook(*this, &control.alpha, {});
        return generate_greedy(*base_, prompt, max_new, eos, &hook);
    }

    std::vector<TokenId> generate(std::span<const TokenId> prompt, std::size_t max_new, std::optional<TokenId> eos,
                                  std::span<const Tensor> alphas) const {
        ControlHook hook(*this, nullptr, alphas);
        return generate_greedy(*base_, prompt, max_new, eos, &hook);
    }

private:
    class ControlHook final : public LinearHook {
    public:
        ControlHook(const AdaptedModel& m, const std::vector<double>* alpha, std::span<const Tensor> router)
            : model_(m), alpha_(alpha), router_(router) {}

        Tensor apply(std::size_t layer, SiteKind kind, const Tensor& x, Tensor base_out) const override {
            const auto idx = model_.index_[layer][static_cast<std::size_t>(kind)];
            if (idx < 0) return base_out;
            const auto& site = model_.sites_[static_cast<std::size_t>(idx)];
            Tensor d;
            if (alpha_) {
                d = site.delta(x, *alpha_);
            } else {
                const auto& a = router_.size() == 1 ? router_[0] : router_[static_cast<std::size_t>(idx)];
                d = site.delta(x, a);
            }
            return d.defined() ? add(base_out, d) : base_out;
        }

    private:
        const AdaptedModel& model_;
        const std::vector<double>* alpha_;
        std::span<const Tensor> router_;
    };

    std::shared_ptr<Transformer> base_;
    AttachSpec spec_;
    std::vector<AdapterSite> sites_;
    std::vector<std::vector<std::ptrdiff_t>> index_;
    std::optional<RouterGate> gate_;
};

}  // namespace magical
