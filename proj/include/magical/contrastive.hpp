// SPDX-License-Identifier: Apache-2.0
//
// Semantic contrastive term on the shared projection A, the composite
// training objective, and the adapter training loop.
//
// For a semantic layer l, the anchor of sample i is A_l applied to the mean
// hidden state of its expert tokens in the live adapted forward. Its key is
// A_l applied to the mean frozen-backbone hidden state of its lay text, with
// A_l taken from the previous optimizer step. Other samples in the batch
// provide the negatives.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "magical/adapter.hpp"
#include "magical/checkpoint.hpp"
#include "magical/corpus.hpp"
#include "magical/probing.hpp"
#include "magical/table.hpp"

namespace magical {

/// -log( Σ_pos exp(cos(x,p)/τ) / Σ_all exp(cos(x,q)/τ) ).
inline Tensor contrastive_loss(const Tensor& anchor, std::span<const Tensor> positives,
                               std::span<const Tensor> negatives, double tau) {
    if (positives.empty()) throw ContractError("contrastive_loss: at least one positive required");
    if (!(tau > 0.0)) throw ConfigurationError("contrastive_loss: temperature must be positive");
    std::vector<Tensor> pos, all;
    for (const auto& p : positives) {
        auto s = reshape(scale(cosine_similarity(anchor, p), 1.0 / tau), {1});
        pos.push_back(s);
        all.push_back(s);
    }
    for (const auto& n : negatives) all.push_back(reshape(scale(cosine_similarity(anchor, n), 1.0 / tau), {1}));
    if (negatives.empty()) {
        // Numerator and denominator coincide.
        return scale(sum(concat(std::span<const Tensor>(pos))), 0.0);
    }
    return sub(logsumexp(concat(std::span<const Tensor>(all))), logsumexp(concat(std::span<const Tensor>(pos))));
}

/// lm + λ · mean of the per-layer terms.
inline Tensor composite_loss(const Tensor& lm, std::span<const Tensor> terms, double lambda) {
    if (lambda < 0.0) throw ConfigurationError("contrastive weight must be non-negative");
    if (lambda == 0.0 || terms.empty()) return lm;
    Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return add(lm, scale(acc, lambda / static_cast<double>(terms.size())));
}

// ---------------------------------------------------------------------------
// Key dictionary

/// A · h for a pooled hidden vector h.
inline Tensor project_row(const Tensor& h, const Tensor& a) {
    return reshape(matmul_nt(reshape(h, {1, h.size()}), a), {a.dim(0)});
}

/// Per-sample keys encoded with a snapshot of A; `snapshot_step` is the
/// optimizer step after which the snapshot was taken (-1: initial A).
struct CachedKeyDictionary {
    std::vector<std::size_t> layers;
    std::map<std::string, std::vector<Tensor>> keys;  // id -> one key per layer
    long snapshot_step = -1;

    std::size_t dim() const { return keys.empty() ? 0 : keys.begin()->second.at(0).size(); }

    const Tensor& layer_key(const std::string& id, std::size_t layer_pos) const {
        auto it = keys.find(id);
        if (it == keys.end()) throw ContractError("no cached key for sample '" + id + "'");
        return it->second.at(layer_pos);
    }

    /// Key averaged over the semantic layers.
    Tensor key(const std::string& id) const {
        auto it = keys.find(id);
        if (it == keys.end()) throw ContractError("no cached key for sample '" + id + "'");
        auto avg = it->second[0].clone();
        for (std::size_t l = 1; l < it->second.size(); ++l)
            for (std::size_t j = 0; j < avg.size(); ++j) avg.data()[j] += it->second[l][j];
        for (auto& v : avg.data()) v /= static_cast<double>(it->second.size());
        return avg;
    }
};

/// Value copies of the contrastive-site A for every layer in S.
inline std::vector<Tensor> snapshot_projections(const AdaptedModel& model, std::span<const std::size_t> layers) {
    std::vector<Tensor> out;
    for (auto l : layers) out.push_back(model.projection(l).clone());
    return out;
}

/// Mean-pooled frozen-backbone activations of a text at each layer in S.
inline std::vector<Tensor> pooled_layer_features(const Transformer& backbone, std::span<const TokenId> tokens,
                                                 std::span<const std::size_t> layers) {
    NoGradGuard no_grad;
    // Texts longer than the context keep their first max_seq tokens.
    const auto acts = backbone.forward(tokens.first(std::min(tokens.size(), backbone.config().max_seq)), nullptr, false).acts;
    std::vector<Tensor> out;
    for (auto l : layers) {
        if (l >= acts.layers.size()) throw ConfigurationError("semantic layer " + std::to_string(l) + " beyond depth");
        out.push_back(mean_rows(acts.layers[l]));
    }
    return out;
}

inline CachedKeyDictionary keys_from_features(std::span<const Tensor> snapshot, std::span<const std::size_t> layers,
                                              const std::vector<std::pair<std::string, std::vector<Tensor>>>& features,
                                              long step) {
    NoGradGuard no_grad;
    CachedKeyDictionary dict;
    dict.layers.assign(layers.begin(), layers.end());
    dict.snapshot_step = step;
    for (const auto& [id, per_layer] : features) {
        std::vector<Tensor> ks;
        for (std::size_t i = 0; i < layers.size(); ++i) ks.push_back(project_row(per_layer[i], snapshot[i]));
        dict.keys[id] = std::move(ks);
    }
    return dict;
}

/// Encodes lay texts with a snapshot of A (one matrix per layer in S).
inline CachedKeyDictionary refresh_keys(std::span<const Tensor> snapshot,
                                        const std::vector<std::pair<std::string, std::vector<TokenId>>>& lay_texts,
                                        const Transformer& backbone, std::span<const std::size_t> layers,
                                        long step = -1) {
    if (layers.empty()) throw ConfigurationError("refresh_keys: empty semantic layer set");
    if (snapshot.size() != layers.size()) throw ContractError("refresh_keys: one snapshot per semantic layer");
    for (const auto& a : snapshot) {
        if (a.requires_grad()) throw ContractError("refresh_keys: snapshot must be a detached copy of A");
    }
    std::vector<std::pair<std::string, std::vector<Tensor>>> feats;
    for (const auto& [id, toks] : lay_texts) feats.emplace_back(id, pooled_layer_features(backbone, toks, layers));
    return keys_from_features(snapshot, layers, feats, step);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t batch_size = 8;
    double learning_rate = 5e-3;
    std::size_t epochs = 0;   // when nonzero, overrides `steps`
    std::size_t steps = 200;
    double lambda = 0.5;
    double tau = 0.5;
    std::vector<std::size_t> semantic_layers;
    std::uint64_t seed = 0;
    double warmup_ratio = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const {
        if (batch_size < 1) throw ConfigurationError("batch size must be >= 1");
        if (!(tau > 0.0)) throw ConfigurationError("temperature must be positive");
        if (lambda < 0.0) throw ConfigurationError("contrastive weight must be non-negative");
        if (learning_rate < 0.0) throw ConfigurationError("learning rate must be non-negative");
        if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw ConfigurationError("warm-up ratio must lie in [0, 1)");
        if (lambda > 0.0 && semantic_layers.empty()) {
            throw ConfigurationError("a positive contrastive weight needs a semantic layer set");
        }
    }
};

/// Linear warm-up over the first ⌈ratio·T⌉ steps, then cosine decay to zero.
inline double scheduled_lr(double base, std::size_t step, std::size_t total, double warmup_ratio) {
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
    if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
    if (total <= warm) return base;
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(const std::vector<NamedTensor>& params, const GradientMap& grads, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& [name, p] : params) {
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(p.size(), 0.0);
                v.assign(p.size(), 0.0);
            }
            const Tensor* g = grads.find(p);
            Tensor handle = p;
            auto w = handle.data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g ? (*g)[i] : 0.0;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                w[i] -= lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd_ * w[i]);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

    void save(Checkpoint& ckpt) const {
        for (const auto& [name, m] : m_) ckpt.tensors.push_back({"adam.m." + name, Tensor({m.size()}, m)});
        for (const auto& [name, v] : v_) ckpt.tensors.push_back({"adam.v." + name, Tensor({v.size()}, v)});
        ckpt.meta["adam_steps"] = t_;
    }

    void load(const Checkpoint& ckpt, const std::vector<NamedTensor>& params) {
        t_ = ckpt.meta.at("adam_steps").get<std::size_t>();
        m_.clear();
        v_.clear();
        if (t_ == 0) return;
        for (const auto& [name, p] : params) {
            m_[name] = ckpt.get("adam.m." + name).values();
            v_[name] = ckpt.get("adam.v." + name).values();
        }
    }

private:
    double beta1_, beta2_, eps_, wd_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

struct TrainLogRow {
    std::size_t step = 0;
    double lr = 0.0;
    double lm_loss = 0.0;
    std::vector<double> contrastive;  // one per semantic layer
    double composite = 0.0;
    std::vector<std::size_t> branch_counts;
    long key_snapshot = -1;
};

struct TrainLog {
    std::vector<std::size_t> layers;
    std::vector<TrainLogRow> rows;

    std::string to_tsv() const {
        Table t;
        t.header = {"step", "lr", "lm_loss"};
        for (auto l : layers) t.header.push_back("contrastive_L" + std::to_string(l));
        t.header.insert(t.header.end(), {"composite", "branch_counts", "key_snapshot"});
        for (const auto& r : rows) {
            std::vector<std::string> cells{std::to_string(r.step), num(r.lr), num(r.lm_loss)};
            for (double c : r.contrastive) cells.push_back(num(c));
            std::string hist;
            for (std::size_t i = 0; i < r.branch_counts.size(); ++i) hist += (i ? "/" : "") + std::to_string(r.branch_counts[i]);
            cells.insert(cells.end(), {num(r.composite), hist, r.key_snapshot < 0 ? "init" : std::to_string(r.key_snapshot)});
            t.add(std::move(cells));
        }
        return t.to_tsv();
    }
};

/// Teacher-forced training sequence [expert ; SEP ; lay ; EOS] and the index
/// of the first scored token (the first lay token).
struct LmSequence {
    std::vector<TokenId> tokens;
    std::size_t expert_len = 0;
    std::vector<std::ptrdiff_t> targets;
};

inline LmSequence lm_sequence(const EncodedSample& s, std::size_t max_seq) {
    std::vector<TokenId> lay = s.lay;
    lay.push_back(Tokenizer::kEos);
    auto pt = pair_tokens(s.expert, lay, max_seq);
    LmSequence out;
    out.expert_len = static_cast<std::size_t>(std::find(pt.tokens.begin(), pt.tokens.end(), Tokenizer::kSep) -
                                              pt.tokens.begin());
    out.targets = shifted_targets(pt.tokens, out.expert_len + 1);
    out.tokens = std::move(pt.tokens);
    return out;
}

/// Adapter training with oracle style switching (or router gating), the
/// composite objective and a per-batch key dictionary refreshed after every
/// step with the updated A.
class Trainer {
public:
    Trainer(AdaptedModel& model, std::vector<EncodedSample> data, TrainConfig cfg)
        : model_(model), data_(std::move(data)), cfg_(std::move(cfg)),
          opt_(cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay) {
        cfg_.validate();
        if (data_.empty()) throw ConfigurationError("training corpus is empty");
        if (cfg_.lambda > 0.0 && model_.spec().scheme == Scheme::MultiLora) {
            throw ConfigurationError("the contrastive term needs a shared A (scheme lora or magical)");
        }
        for (const auto& s : data_) {
            if (model_.spec().mode == ControlMode::Switch && s.style >= model_.branches()) {
                throw RoutingError("sample '" + s.id + "' has style index " + std::to_string(s.style) +
                                   " but the adapter has " + std::to_string(model_.branches()) + " branches");
            }
        }
        log_.layers = contrastive_layers();
        build_schedule();
        if (uses_contrastive()) refresh_for(0, -1);
    }

    std::size_t total_steps() const { return schedule_.size(); }
    std::size_t current_step() const { return step_; }
    const TrainLog& log() const { return log_; }
    const CachedKeyDictionary& keys() const { return keys_; }
    const TrainConfig& config() const { return cfg_; }

    /// Runs steps until `until` (exclusive) or the end of the schedule.
    void run(std::size_t until) {
        until = std::min(until, total_steps());
        while (step_ < until) one_step();
    }

    void run() { run(total_steps()); }

    /// Full-precision state for resuming: trainables, optimizer moments, step.
    Checkpoint resume_state() const {
        Checkpoint c;
        c.dtype = DType::Float64;
        for (const auto& p : model_.trainable_parameters()) c.tensors.push_back({p.name, p.tensor.clone()});
        opt_.save(c);
        c.meta["step"] = step_;
        return c;
    }

    void restore(const Checkpoint& c) {
        const auto params = model_.trainable_parameters();
        restore_into(params, c);
        opt_.load(c, params);
        step_ = c.meta.at("step").get<std::size_t>();
        log_.rows.clear();
        if (uses_contrastive() && step_ < total_steps()) refresh_for(step_, static_cast<long>(step_) - 1);
    }

    /// One step's objective on a batch (recording if a tape is active).
    struct Objective {
        Tensor composite;
        Tensor lm;
        std::vector<Tensor> contrastive;
        std::vector<std::size_t> branch_counts;
    };

    Objective objective(std::span<const std::size_t> batch, const CachedKeyDictionary* keys) const {
        Objective out;
        out.branch_counts.assign(model_.branches(), 0);
        const std::size_t n_layers = log_.layers.size();
        std::vector<std::vector<Tensor>> anchors(n_layers);
        std::vector<Tensor> projections;
        const bool contrast = uses_contrastive() && keys != nullptr;
        if (contrast)
            for (auto l : log_.layers) projections.push_back(model_.projection(l));

        Tensor lm_sum;
        for (auto idx : batch) {
            const auto& s = data_[idx];
            const auto seq = lm_sequence(s, model_.base().config().max_seq);
            ForwardResult fr;
            if (model_.spec().mode == ControlMode::Switch) {
                fr = model_.forward(seq.tokens, BranchControl::switch_to(s.style, model_.branches()));
                ++out.branch_counts[s.style];
            } else {
                const auto alphas = model_.router_alphas(std::span<const TokenId>(seq.tokens).first(seq.expert_len));
                fr = model_.forward(seq.tokens, alphas);
                ++out.branch_counts[argmax(alphas[0].data())];
            }
            Tensor li = lm_loss(fr.logits, seq.targets);
            lm_sum = lm_sum.defined() ? add(lm_sum, li) : li;
            if (contrast) {
                for (std::size_t k = 0; k < n_layers; ++k) {
                    const auto pooled = mean_rows(fr.acts.layers[log_.layers[k]], 0, seq.expert_len);
                    anchors[k].push_back(project_row(pooled, projections[k]));
                }
            }
        }
        out.lm = scale(lm_sum, 1.0 / static_cast<double>(batch.size()));
        if (contrast) {
            for (std::size_t k = 0; k < n_layers; ++k) {
                Tensor term;
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const Tensor pos[1] = {keys->layer_key(data_[batch[i]].id, k)};
                    std::vector<Tensor> neg;
                    for (std::size_t j = 0; j < batch.size(); ++j)
                        if (j != i) neg.push_back(keys->layer_key(data_[batch[j]].id, k));
                    Tensor li = contrastive_loss(anchors[k][i], pos, neg, cfg_.tau);
                    term = term.defined() ? add(term, li) : li;
                }
                out.contrastive.push_back(scale(term, 1.0 / static_cast<double>(batch.size())));
            }
        }
        out.composite = composite_loss(out.lm, out.contrastive, cfg_.lambda);
        return out;
    }

    const std::vector<std::size_t>& batch(std::size_t step) const { return schedule_.at(step); }

private:
    bool uses_contrastive() const { return cfg_.lambda > 0.0; }

    std::vector<std::size_t> contrastive_layers() const { return uses_contrastive() ? cfg_.semantic_layers : std::vector<std::size_t>{}; }

    void build_schedule() {
        Rng rng(derive_seed(cfg_.seed, 0x7A1));
        const std::size_t n = data_.size();
        const std::size_t per_epoch = (n + cfg_.batch_size - 1) / cfg_.batch_size;
        const std::size_t total = cfg_.epochs ? cfg_.epochs * per_epoch : cfg_.steps;
        std::vector<std::size_t> order(n);
        while (schedule_.size() < total) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            rng.shuffle(order.begin(), order.end());
            for (std::size_t b = 0; b < n && schedule_.size() < total; b += cfg_.batch_size)
                schedule_.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + cfg_.batch_size)));
        }
    }

    const std::vector<Tensor>& lay_features(std::size_t idx) {
        auto it = feature_cache_.find(idx);
        if (it != feature_cache_.end()) return it->second;
        return feature_cache_[idx] = pooled_layer_features(model_.base(), data_[idx].lay, log_.layers);
    }

    void refresh_for(std::size_t step, long snapshot_step) {
        std::vector<std::pair<std::string, std::vector<Tensor>>> feats;
        for (auto idx : schedule_.at(step)) feats.emplace_back(data_[idx].id, lay_features(idx));
        const auto snap = snapshot_projections(model_, log_.layers);
        keys_ = keys_from_features(snap, log_.layers, feats, snapshot_step);
    }

    void one_step() {
        const auto& b = schedule_[step_];
        TrainLogRow row;
        row.step = step_;
        row.lr = scheduled_lr(cfg_.learning_rate, step_, total_steps(), cfg_.warmup_ratio);
        row.key_snapshot = uses_contrastive() ? keys_.snapshot_step : -1;
        const auto params = model_.trainable_parameters();
        GradientMap grads;
        {
            GradientTape tape;
            auto obj = objective(b, uses_contrastive() ? &keys_ : nullptr);
            row.lm_loss = obj.lm.item();
            for (const auto& c : obj.contrastive) row.contrastive.push_back(c.item());
            row.composite = obj.composite.item();
            row.branch_counts = obj.branch_counts;
            grads = tape.backward(obj.composite);
        }
        opt_.step(params, grads, row.lr);
        log_.rows.push_back(std::move(row));
        ++step_;
        if (uses_contrastive() && step_ < total_steps()) refresh_for(step_, static_cast<long>(step_) - 1);
    }

    AdaptedModel& model_;
    std::vector<EncodedSample> data_;
    TrainConfig cfg_;
    AdamW opt_;
    std::vector<std::vector<std::size_t>> schedule_;
    std::size_t step_ = 0;
    TrainLog log_;
    CachedKeyDictionary keys_;
    std::map<std::size_t, std::vector<Tensor>> feature_cache_;
};

/// Full-parameter language-model warm start of the backbone on
/// style-agnostic pairs, standing in for a pretrained model. Parameters are
/// left frozen on return. Returns the per-step loss.
struct WarmStartConfig {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    double learning_rate = 3e-3;
    double warmup_ratio = 0.1;
    std::uint64_t seed = 0;
};

inline std::vector<double> warm_start(Transformer& model, const std::vector<EncodedSample>& data,
                                      const WarmStartConfig& cfg) {
    if (data.empty()) throw ConfigurationError("warm start: empty corpus");
    if (cfg.batch_size < 1) throw ConfigurationError("warm start: batch size must be >= 1");
    model.set_trainable(true);
    const auto params = model.parameters();
    AdamW opt(0.9, 0.999, 1e-8, 0.0);
    Rng rng(derive_seed(cfg.seed, 0x3A5));
    std::vector<std::size_t> order(data.size());
    std::size_t cursor = order.size();
    std::vector<double> losses;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        GradientMap grads;
        {
            GradientTape tape;
            Tensor total;
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                if (cursor == order.size()) {
                    std::iota(order.begin(), order.end(), std::size_t{0});
                    rng.shuffle(order.begin(), order.end());
                    cursor = 0;
                }
                const auto seq = lm_sequence(data[order[cursor++]], model.config().max_seq);
                Tensor li = lm_loss(model.forward(seq.tokens).logits, seq.targets);
                total = total.defined() ? add(total, li) : li;
            }
            total = scale(total, 1.0 / static_cast<double>(cfg.batch_size));
            losses.push_back(total.item());
            grads = tape.backward(total);
        }
        opt.step(params, grads, scheduled_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_ratio));
    }
    model.set_trainable(false);
    return losses;
}

inline TrainLog train(AdaptedModel& model, std::vector<EncodedSample> data, const TrainConfig& cfg) {
    Trainer t(model, std::move(data), cfg);
    t.run();
    return t.log();
}

}  // namespace magical
