// SPDX-License-Identifier: Apache-2.0
//
// Small pre-norm decoder-only transformer with learned absolute positions,
// GELU feed-forward blocks and a head tied to the token embedding. Every
// projection is bias-free (y = W x) so adapters attach as pure residuals.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "magical/grad_check.hpp"
#include "magical/random.hpp"
#include "magical/tensor.hpp"

namespace magical {

using TokenId = std::size_t;

struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct LengthError : std::length_error {
    using std::length_error::length_error;
};

struct ConfigurationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 0;
    std::size_t max_seq = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
            throw ConfigurationError("model config: all counts must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigurationError("model config: d_model " + std::to_string(d_model) + " not divisible by " +
                                     std::to_string(n_heads) + " heads");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class SiteKind { Query, Key, Value, Output, FeedUp, FeedDown };

inline constexpr std::array<SiteKind, 6> kAllSites = {SiteKind::Query,  SiteKind::Key,    SiteKind::Value,
                                                      SiteKind::Output, SiteKind::FeedUp, SiteKind::FeedDown};

inline const char* site_name(SiteKind s) {
    switch (s) {
        case SiteKind::Query: return "q";
        case SiteKind::Key: return "k";
        case SiteKind::Value: return "v";
        case SiteKind::Output: return "o";
        case SiteKind::FeedUp: return "up";
        case SiteKind::FeedDown: return "down";
    }
    return "?";
}

inline SiteKind parse_site(const std::string& name) {
    for (auto s : kAllSites)
        if (name == site_name(s)) return s;
    throw ConfigurationError("unknown adapter site '" + name + "' (expected q, k, v, o, up or down)");
}

/// Post-block hidden states; index 0 is the embedding output.
struct LayerActivations {
    std::vector<Tensor> layers;
};

struct ForwardResult {
    Tensor logits;
    LayerActivations acts;
};

/// Intercepts every weight application y = x Wᵀ. Layers are 1-based.
class LinearHook {
public:
    virtual ~LinearHook() = default;
    virtual Tensor apply(std::size_t layer, SiteKind site, const Tensor& x, Tensor base_out) const = 0;
};

/// Test fixture: adds a pair-consistency feature to the activation reported
/// at one layer. The feature is the fraction of tokens after the first
/// separator that also occur before it, times `strength`, along `direction`.
struct PlantedSignal {
    std::size_t layer = 1;
    double strength = 1.0;
    TokenId separator = 0;
    std::vector<double> direction;

    double consistency(std::span<const TokenId> tokens) const {
        auto sep = std::find(tokens.begin(), tokens.end(), separator);
        if (sep == tokens.end() || sep + 1 == tokens.end()) return 0.0;
        std::vector<TokenId> first(tokens.begin(), sep);
        std::sort(first.begin(), first.end());
        std::size_t hits = 0, total = 0;
        for (auto it = sep + 1; it != tokens.end(); ++it, ++total)
            if (std::binary_search(first.begin(), first.end(), *it)) ++hits;
        return static_cast<double>(hits) / static_cast<double>(total);
    }
};

struct TransformerBlock {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_up, w_down;

    const Tensor& weight(SiteKind s) const {
        switch (s) {
            case SiteKind::Query: return wq;
            case SiteKind::Key: return wk;
            case SiteKind::Value: return wv;
            case SiteKind::Output: return wo;
            case SiteKind::FeedUp: return w_up;
            case SiteKind::FeedDown: return w_down;
        }
        throw std::logic_error("bad site");
    }
};

class Transformer {
public:
    explicit Transformer(ModelConfig config) : config_(config) {
        config_.validate();
        Rng rng(config_.seed);
        constexpr double std = 0.02;
        const std::size_t d = config_.d_model;
        token_embedding_ = rng.gaussian({config_.vocab_size, d}, std);
        position_embedding_ = rng.gaussian({config_.max_seq, d}, std);
        blocks_.resize(config_.n_layers);
        for (auto& b : blocks_) {
            b.ln1_gain = Tensor::filled({d}, 1.0);
            b.ln1_bias = Tensor::zeros({d});
            b.wq = rng.gaussian({d, d}, std);
            b.wk = rng.gaussian({d, d}, std);
            b.wv = rng.gaussian({d, d}, std);
            b.wo = rng.gaussian({d, d}, std);
            b.ln2_gain = Tensor::filled({d}, 1.0);
            b.ln2_bias = Tensor::zeros({d});
            b.w_up = rng.gaussian({config_.d_ff, d}, std);
            b.w_down = rng.gaussian({d, config_.d_ff}, std);
        }
        lnf_gain_ = Tensor::filled({d}, 1.0);
        lnf_bias_ = Tensor::zeros({d});
    }

    const ModelConfig& config() const { return config_; }
    const TransformerBlock& block(std::size_t layer) const { return blocks_.at(layer - 1); }
    const Tensor& token_embedding() const { return token_embedding_; }
    const Tensor& position_embedding() const { return position_embedding_; }
    const Tensor& final_norm_gain() const { return lnf_gain_; }
    const Tensor& final_norm_bias() const { return lnf_bias_; }

    void set_planted_signal(std::optional<PlantedSignal> plant) {
        if (plant) {
            if (plant->layer > config_.n_layers) throw ConfigurationError("planted layer beyond model depth");
            if (plant->direction.size() != config_.d_model) throw ConfigurationError("planted direction size");
        }
        plant_ = std::move(plant);
    }
    const std::optional<PlantedSignal>& planted_signal() const { return plant_; }

    /// Parameters in a stable order with stable names.
    std::vector<NamedTensor> parameters() const {
        std::vector<NamedTensor> out;
        out.push_back({"embed.token", token_embedding_});
        out.push_back({"embed.position", position_embedding_});
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto p = "block" + std::to_string(l + 1) + ".";
            const auto& b = blocks_[l];
            out.push_back({p + "ln1.gain", b.ln1_gain});
            out.push_back({p + "ln1.bias", b.ln1_bias});
            out.push_back({p + "attn.q", b.wq});
            out.push_back({p + "attn.k", b.wk});
            out.push_back({p + "attn.v", b.wv});
            out.push_back({p + "attn.o", b.wo});
            out.push_back({p + "ln2.gain", b.ln2_gain});
            out.push_back({p + "ln2.bias", b.ln2_bias});
            out.push_back({p + "ff.up", b.w_up});
            out.push_back({p + "ff.down", b.w_down});
        }
        out.push_back({"final_norm.gain", lnf_gain_});
        out.push_back({"final_norm.bias", lnf_bias_});
        return out;
    }

    void set_trainable(bool on) {
        for (auto& p : parameters()) p.tensor.set_requires_grad(on);
    }

    void check_tokens(std::span<const TokenId> tokens) const {
        if (tokens.empty()) throw InputError("empty token sequence");
        if (tokens.size() > config_.max_seq) {
            throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                              std::to_string(config_.max_seq));
        }
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            if (tokens[t] >= config_.vocab_size) {
                throw InputError("token id " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                                 " is outside the vocabulary of " + std::to_string(config_.vocab_size));
            }
        }
    }

    /// Causal forward pass. `hook` may rewrite every projection output.
    /// With `with_logits` false only activations are produced.
    ForwardResult forward(std::span<const TokenId> tokens, const LinearHook* hook = nullptr,
                          bool with_logits = true) const {
        check_tokens(tokens);
        const std::size_t seq = tokens.size();
        ForwardResult result;
        std::vector<std::size_t> positions(seq);
        std::iota(positions.begin(), positions.end(), std::size_t{0});
        Tensor h = add(embedding(token_embedding_, tokens), embedding(position_embedding_, positions));
        result.acts.layers.push_back(tap(0, h, tokens));
        for (std::size_t l = 1; l <= blocks_.size(); ++l) {
            h = block_forward(l, h, hook);
            result.acts.layers.push_back(tap(l, h, tokens));
        }
        if (with_logits) result.logits = logits_from_hidden(h);
        return result;
    }

    Tensor logits_from_hidden(const Tensor& h) const {
        return matmul_nt(layer_norm(h, lnf_gain_, lnf_bias_), token_embedding_);
    }

    /// Projection through one site, with the hook applied.
    Tensor project(std::size_t layer, SiteKind site, const Tensor& x, const LinearHook* hook) const {
        Tensor y = matmul_nt(x, block(layer).weight(site));
        return hook ? hook->apply(layer, site, x, std::move(y)) : y;
    }

    /// Attention over (possibly cached) keys/values; q rows are the last rows
    /// of the key sequence.
    Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v) const {
        const std::size_t heads = config_.n_heads;
        const std::size_t dh = config_.d_model / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> outs;
        outs.reserve(heads);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            Tensor qh = heads == 1 ? q : slice_cols(q, hd * dh, dh);
            Tensor kh = heads == 1 ? k : slice_cols(k, hd * dh, dh);
            Tensor vh = heads == 1 ? v : slice_cols(v, hd * dh, dh);
            Tensor p = causal_softmax(scale(matmul_nt(qh, kh), inv_sqrt));
            outs.push_back(matmul(p, vh));
        }
        return heads == 1 ? outs[0] : concat(std::span<const Tensor>(outs), 1);
    }

    Tensor feed_forward(std::size_t layer, const Tensor& h, const LinearHook* hook) const {
        const auto& b = block(layer);
        Tensor x = layer_norm(h, b.ln2_gain, b.ln2_bias);
        Tensor up = gelu(project(layer, SiteKind::FeedUp, x, hook));
        return add(h, project(layer, SiteKind::FeedDown, up, hook));
    }

private:
    Tensor block_forward(std::size_t layer, const Tensor& h, const LinearHook* hook) const {
        const auto& b = block(layer);
        Tensor x = layer_norm(h, b.ln1_gain, b.ln1_bias);
        Tensor q = project(layer, SiteKind::Query, x, hook);
        Tensor k = project(layer, SiteKind::Key, x, hook);
        Tensor v = project(layer, SiteKind::Value, x, hook);
        Tensor attn = project(layer, SiteKind::Output, attend(q, k, v), hook);
        return feed_forward(layer, add(h, attn), hook);
    }

    Tensor tap(std::size_t layer, const Tensor& h, std::span<const TokenId> tokens) const {
        if (!plant_ || plant_->layer != layer) return h;
        const double c = plant_->strength * plant_->consistency(tokens);
        auto shifted = h.clone();
        const std::size_t d = config_.d_model;
        for (std::size_t t = 0; t < h.dim(0); ++t)
            for (std::size_t j = 0; j < d; ++j) shifted.data()[t * d + j] += c * plant_->direction[j];
        return shifted;
    }

    ModelConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    std::vector<TransformerBlock> blocks_;
    Tensor lnf_gain_, lnf_bias_;
    std::optional<PlantedSignal> plant_;
};

/// Mean next-token cross-entropy. Logit row t predicts targets[t]; rows with
/// target kIgnoreTarget are excluded (callers shift by one and mask the prompt).
inline Tensor lm_loss(const Tensor& logits, std::span<const std::ptrdiff_t> targets) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
        throw ContractError("lm_loss: " + std::to_string(targets.size()) + " targets for logits " +
                            shape_str(logits.shape()));
    }
    return cross_entropy(logits, targets);
}

/// Builds shifted targets for a sequence: position t predicts token t+1 when
/// t+1 >= first_scored, otherwise it is ignored. The last position is ignored.
inline std::vector<std::ptrdiff_t> shifted_targets(std::span<const TokenId> tokens, std::size_t first_scored) {
    std::vector<std::ptrdiff_t> targets(tokens.size(), kIgnoreTarget);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t)
        if (t + 1 >= first_scored) targets[t] = static_cast<std::ptrdiff_t>(tokens[t + 1]);
    return targets;
}

/// Token-at-a-time decoder with per-layer key/value caches. Never records.
class IncrementalDecoder {
public:
    IncrementalDecoder(const Transformer& model, const LinearHook* hook = nullptr)
        : model_(model), hook_(hook), keys_(model.config().n_layers), values_(model.config().n_layers) {}

    std::size_t position() const { return position_; }

    /// Feeds one token and returns the next-token logits [vocab].
    Tensor step(TokenId token) {
        NoGradGuard no_grad;
        const auto& cfg = model_.config();
        const TokenId tok[1] = {token};
        model_.check_tokens(tok);
        if (position_ >= cfg.max_seq) throw LengthError("incremental decoding beyond max_seq");
        const std::size_t pos[1] = {position_};
        Tensor h = add(embedding(model_.token_embedding(), tok), embedding(model_.position_embedding(), pos));
        for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
            const auto& b = model_.block(l);
            Tensor x = layer_norm(h, b.ln1_gain, b.ln1_bias);
            Tensor q = model_.project(l, SiteKind::Query, x, hook_);
            append(keys_[l - 1], model_.project(l, SiteKind::Key, x, hook_));
            append(values_[l - 1], model_.project(l, SiteKind::Value, x, hook_));
            Tensor attn = model_.project(l, SiteKind::Output, model_.attend(q, keys_[l - 1], values_[l - 1]), hook_);
            h = model_.feed_forward(l, add(h, attn), hook_);
        }
        ++position_;
        return reshape(model_.logits_from_hidden(h), {cfg.vocab_size});
    }

private:
    static void append(Tensor& cache, const Tensor& row) { cache = cache.defined() ? concat({cache, row}, 0) : row; }

    const Transformer& model_;
    const LinearHook* hook_;
    std::vector<Tensor> keys_;
    std::vector<Tensor> values_;
    std::size_t position_ = 0;
};

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Greedy decoding: returns the prompt followed by generated ids, stopping
/// after `eos` is emitted, after `max_new` tokens, or at max_seq.
inline std::vector<TokenId> generate_greedy(const Transformer& model, std::span<const TokenId> prompt,
                                            std::size_t max_new, std::optional<TokenId> eos = std::nullopt,
                                            const LinearHook* hook = nullptr) {
    if (prompt.empty()) throw InputError("generate_greedy: empty prompt");
    model.check_tokens(prompt);
    std::vector<TokenId> out(prompt.begin(), prompt.end());
    if (max_new == 0) return out;
    IncrementalDecoder dec(model, hook);
    Tensor logits;
    for (TokenId t : prompt) logits = dec.step(t);
    for (std::size_t i = 0; i < max_new && out.size() < model.config().max_seq; ++i) {
        const TokenId next = argmax(logits.data());
        out.push_back(next);
        if (eos && next == *eos) break;
        if (i + 1 < max_new && out.size() < model.config().max_seq) logits = dec.step(next);
    }
    return out;
}

}  // namespace magical
