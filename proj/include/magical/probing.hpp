// SPDX-License-Identifier: Apache-2.0
//
// Layer probing. Each expert text is paired with its own lay text (label 1)
// and with lay texts of other samples (label 0); a logistic probe on the
// mean-pooled activations of every layer then ranks the layers by how well
// they tell matched from mismatched pairs.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "magical/corpus.hpp"
#include "magical/model.hpp"
#include "magical/random.hpp"

namespace magical {

struct SamplingError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DegenerateSplitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ProbePair {
    std::size_t expert_index = 0;
    std::size_t lay_index = 0;
    int label = 0;
};

inline std::vector<ProbePair> build_probe_dataset(std::size_t corpus_size, std::size_t negatives_per_positive,
                                                  std::uint64_t seed) {
    if (corpus_size < 2) throw SamplingError("probe dataset needs at least two samples");
    if (negatives_per_positive >= corpus_size) {
        throw SamplingError(std::to_string(negatives_per_positive) + " negatives per positive from a corpus of " +
                            std::to_string(corpus_size));
    }
    Rng rng(seed);
    std::vector<ProbePair> out;
    out.reserve(corpus_size * (1 + negatives_per_positive));
    for (std::size_t i = 0; i < corpus_size; ++i) {
        out.push_back({i, i, 1});
        // Uniform draw without replacement from {0..n-1} \ {i}: sample from
        // n-1 slots and skip over i.
        std::set<std::size_t> chosen;
        while (chosen.size() < negatives_per_positive) {
            std::size_t j = rng.index(corpus_size - 1);
            if (j >= i) ++j;
            chosen.insert(j);
        }
        for (auto j : chosen) out.push_back({i, j, 0});
    }
    return out;
}

inline std::vector<ProbePair> build_probe_dataset(const PairedCorpus& corpus, std::size_t negatives_per_positive,
                                                  std::uint64_t seed) {
    return build_probe_dataset(corpus.size(), negatives_per_positive, seed);
}

struct PairTokens {
    std::vector<TokenId> tokens;
    bool truncated = false;
};

/// [expert ; SEP ; lay], cut to max_seq by shortening both halves evenly.
/// A half shorter than its share donates the remainder to the other.
inline PairTokens pair_tokens(std::span<const TokenId> expert, std::span<const TokenId> lay, std::size_t max_seq) {
    if (max_seq < 3) throw LengthError("pair_tokens: max_seq too small for a pair");
    const std::size_t budget = max_seq - 1;
    std::size_t ne = expert.size(), nl = lay.size();
    PairTokens out;
    if (ne + nl > budget) {
        out.truncated = true;
        const std::size_t half = budget / 2;
        if (ne <= half) {
            nl = budget - ne;
        } else if (nl <= budget - half) {
            ne = budget - nl;
        } else {
            ne = half;
            nl = budget - half;
        }
    }
    out.tokens.assign(expert.begin(), expert.begin() + static_cast<std::ptrdiff_t>(ne));
    out.tokens.push_back(Tokenizer::kSep);
    out.tokens.insert(out.tokens.end(), lay.begin(), lay.begin() + static_cast<std::ptrdiff_t>(nl));
    return out;
}

struct PairFeatures {
    std::vector<std::vector<double>> per_layer;  // index l: mean-pooled layer-l activation
    bool truncated = false;
};

/// Mean-pooled activations of every layer 0..n_layers for one pair.
inline PairFeatures pair_features(const Transformer& model, const std::vector<EncodedSample>& data,
                                  const ProbePair& pair) {
    NoGradGuard no_grad;
    const auto pt = pair_tokens(data.at(pair.expert_index).expert, data.at(pair.lay_index).lay,
                                model.config().max_seq);
    const auto acts = model.forward(pt.tokens, nullptr, false).acts;
    PairFeatures f;
    f.truncated = pt.truncated;
    for (const auto& a : acts.layers) {
        const auto pooled = mean_rows(a);
        f.per_layer.emplace_back(pooled.data().begin(), pooled.data().end());
    }
    return f;
}

inline std::vector<double> layer_feature(const Transformer& model, const std::vector<EncodedSample>& data,
                                         const ProbePair& pair, std::size_t layer) {
    if (layer > model.config().n_layers) {
        throw ConfigurationError("layer " + std::to_string(layer) + " beyond model depth " +
                                 std::to_string(model.config().n_layers));
    }
    return pair_features(model, data, pair).per_layer[layer];
}

struct ProbeOptions {
    std::size_t steps = 200;
    double learning_rate = 0.1;
    double train_fraction = 0.8;
};

struct ProbeFit {
    std::vector<double> weights;  // on standardized features
    double bias = 0.0;
    std::vector<double> feature_mean, feature_scale;
    double validation_accuracy = 0.0;
    std::vector<double> loss_history;  // training loss before each step and after the last

    /// P(label = 1); exactly 0.5 is classified as 0.
    double probability(std::span<const double> x) const {
        double z = bias;
        for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * (x[j] - feature_mean[j]) / feature_scale[j];
        return 1.0 / (1.0 + std::exp(-z));
    }
    int predict(std::span<const double> x) const { return probability(x) > 0.5 ? 1 : 0; }
};

/// Logistic regression by full-batch gradient descent on a seeded 4/5 split.
/// Features are standardized with training-split statistics.
inline ProbeFit fit_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                          std::uint64_t split_seed, const ProbeOptions& opt = {}) {
    const std::size_t n = features.size();
    if (labels.size() != n) throw ContractError("fit_probe: feature and label counts differ");
    if (n < 5) throw DegenerateSplitError("fit_probe needs at least 5 samples");
    const std::size_t d = features[0].size();
    for (const auto& f : features)
        if (f.size() != d) throw DimensionError("fit_probe: ragged feature vectors");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(split_seed);
    rng.shuffle(order.begin(), order.end());
    const auto n_train = static_cast<std::size_t>(std::floor(opt.train_fraction * static_cast<double>(n)));
    const std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    const std::vector<std::size_t> valid(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::size_t pos = 0;
    for (auto i : train) pos += labels[i] == 1;
    if (pos == 0 || pos == train.size()) throw DegenerateSplitError("probe training split contains a single class");
    if (valid.empty()) throw DegenerateSplitError("probe validation split is empty");

    ProbeFit fit;
    fit.feature_mean.assign(d, 0.0);
    fit.feature_scale.assign(d, 0.0);
    for (auto i : train)
        for (std::size_t j = 0; j < d; ++j) fit.feature_mean[j] += features[i][j];
    for (auto& m : fit.feature_mean) m /= static_cast<double>(train.size());
    for (auto i : train)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = features[i][j] - fit.feature_mean[j];
            fit.feature_scale[j] += c * c;
        }
    for (auto& s : fit.feature_scale) {
        s = std::sqrt(s / static_cast<double>(train.size()));
        if (s < 1e-12) s = 1.0;
    }

    std::vector<std::vector<double>> z(train.size(), std::vector<double>(d));
    for (std::size_t r = 0; r < train.size(); ++r)
        for (std::size_t j = 0; j < d; ++j)
            z[r][j] = (features[train[r]][j] - fit.feature_mean[j]) / fit.feature_scale[j];

    fit.weights.assign(d, 0.0);
    const double inv_n = 1.0 / static_cast<double>(train.size());
    std::vector<double> gw(d);
    for (std::size_t step = 0; step <= opt.steps; ++step) {
        double loss = 0.0, gb = 0.0;
        std::fill(gw.begin(), gw.end(), 0.0);
        for (std::size_t r = 0; r < train.size(); ++r) {
            double logit = fit.bias;
            for (std::size_t j = 0; j < d; ++j) logit += fit.weights[j] * z[r][j];
            const double y = labels[train[r]];
            // log(1 + e^{-|t|}) + max(t, 0) - y t, stable for large |t|
            loss += std::log1p(std::exp(-std::abs(logit))) + std::max(logit, 0.0) - y * logit;
            const double err = 1.0 / (1.0 + std::exp(-logit)) - y;
            gb += err;
            for (std::size_t j = 0; j < d; ++j) gw[j] += err * z[r][j];
        }
        fit.loss_history.push_back(loss * inv_n);
        if (step == opt.steps) break;
        fit.bias -= opt.learning_rate * gb * inv_n;
        for (std::size_t j = 0; j < d; ++j) fit.weights[j] -= opt.learning_rate * gw[j] * inv_n;
    }

    std::size_t correct = 0;
    for (auto i : valid) correct += fit.predict(features[i]) == labels[i];
    fit.validation_accuracy = static_cast<double>(correct) / static_cast<double>(valid.size());
    return fit;
}

struct LayerAccuracy {
    std::size_t layer = 0;
    double accuracy = 0.0;
};

/// The K layers with the highest accuracy, ties to the lower index, sorted.
inline std::vector<std::size_t> select_semantic_layers(std::vector<LayerAccuracy> reports, std::size_t k) {
    if (k > reports.size()) {
        throw ConfigurationError("cannot select " + std::to_string(k) + " layers out of " +
                                 std::to_string(reports.size()));
    }
    std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
        return a.accuracy != b.accuracy ? a.accuracy > b.accuracy : a.layer < b.layer;
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(reports[i].layer);
    std::sort(out.begin(), out.end());
    return out;
}

/// K scaled from the reference setting of half the depth.
inline std::size_t default_probe_k(std::size_t n_layers) { return std::max<std::size_t>(1, n_layers / 2); }

struct ProbeReport {
    std::vector<LayerAccuracy> layers;
    std::vector<std::size_t> selected;
    std::size_t pairs = 0;
    std::size_t truncated_pairs = 0;

    bool is_selected(std::size_t layer) const {
        return std::find(selected.begin(), selected.end(), layer) != selected.end();
    }

    std::string to_tsv() const {
        std::ostringstream os;
        os << "layer\taccuracy\tselected\n";
        os.setf(std::ios::fixed);
        os.precision(6);
        for (const auto& l : layers) os << l.layer << '\t' << l.accuracy << '\t' << (is_selected(l.layer) ? 1 : 0) << '\n';
        return os.str();
    }

    static ProbeReport from_tsv(const std::string& text) {
        ProbeReport r;
        std::istringstream is(text);
        std::string line;
        if (!std::getline(is, line) || line != "layer\taccuracy\tselected") {
            throw SchemaError("probe report: missing header");
        }
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            LayerAccuracy la;
            int sel = 0;
            if (!(ls >> la.layer >> la.accuracy >> sel)) throw SchemaError("probe report: malformed row '" + line + "'");
            r.layers.push_back(la);
            if (sel) r.selected.push_back(la.layer);
        }
        return r;
    }
};

struct ProbeConfig {
    std::size_t negatives_per_positive = 1;
    std::size_t k = 0;  // 0: half the depth
    bool include_embedding_layer = false;
    ProbeOptions fit;
};

/// Probes layers 1..n_layers (and layer 0 if asked) of a frozen model and
/// selects the top K.
inline ProbeReport probe_layers(const Transformer& model, const std::vector<EncodedSample>& data,
                                const ProbeConfig& cfg, std::uint64_t seed) {
    const auto pairs = build_probe_dataset(data.size(), cfg.negatives_per_positive, derive_seed(seed, 0x9B0));
    const std::size_t n_layers = model.config().n_layers;
    std::vector<std::vector<std::vector<double>>> by_layer(n_layers + 1);
    std::vector<int> labels;
    ProbeReport report;
    report.pairs = pairs.size();
    for (const auto& p : pairs) {
        auto f = pair_features(model, data, p);
        report.truncated_pairs += f.truncated;
        for (std::size_t l = 0; l <= n_layers; ++l) by_layer[l].push_back(std::move(f.per_layer[l]));
        labels.push_back(p.label);
    }
    const std::uint64_t split_seed = derive_seed(seed, 0x5B1);
    for (std::size_t l = cfg.include_embedding_layer ? 0 : 1; l <= n_layers; ++l)
        report.layers.push_back({l, fit_probe(by_layer[l], labels, split_seed, cfg.fit).validation_accuracy});
    const std::size_t k = cfg.k ? cfg.k : default_probe_k(n_layers);
    report.selected = select_semantic_layers(report.layers, k);
    return report;
}

}  // namespace magical
