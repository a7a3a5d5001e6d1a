// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, pipeline stages (probe, train, evaluate, analyze,
// sweep, paramcount) and run directories with manifests.
//
// A training run directory holds everything later stages need:
//
//   config.json        resolved run configuration
//   vocab.txt          tokenizer vocabulary, one token per line
//   base/              frozen backbone (checkpoint, float32)
//   adapter/           adapter trainables (checkpoint, float32)
//   resume/            trainer state for resuming (checkpoint, float64)
//   train_log.tsv      per-step losses
//   manifest.json      command, seed and artifact hashes

#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "magical/adapter.hpp"
#include "magical/checkpoint.hpp"
#include "magical/contrastive.hpp"
#include "magical/corpus.hpp"
#include "magical/metrics.hpp"
#include "magical/model.hpp"
#include "magical/probing.hpp"
#include "magical/switch_control.hpp"
#include "magical/table.hpp"

namespace magical {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct ParityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct CorpusSection {
    std::string train;  // JSON Lines; empty selects the synthetic corpus
    std::string test;   // optional; otherwise a stratified split of `train`
    std::size_t samples_per_style = 60;
    std::optional<std::uint64_t> seed;  // synthetic corpus seed; defaults to the run seed
    std::optional<PlantedSpec> planted;
    double train_fraction = 0.8;
};

struct ModelSection {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq = 64;
};

struct AdapterSection {
    Scheme scheme = Scheme::Magical;
    std::size_t rank = 4;
    std::size_t branches = 0;  // 0: one per style
    std::vector<std::size_t> layers;
    std::vector<SiteKind> sites = {SiteKind::Query, SiteKind::Value, SiteKind::FeedUp, SiteKind::FeedDown};
    ControlMode mode = ControlMode::Switch;
    RouterScope router_scope = RouterScope::Global;
    SiteKind contrastive_site = SiteKind::Query;
};

struct SweepSection {
    std::string axis;  // rank | recommender_accuracy | scheme
    ojson values = ojson::array();
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs";
    CorpusSection corpus;
    ModelSection model;
    WarmStartConfig warm_start;
    AdapterSection adapter;
    TrainConfig train;  // semantic_layers and seed are filled per run
    ProbeConfig probe;
    std::string probe_report;  // path to a probe report; required when lambda > 0 for `train`
    std::size_t max_new_tokens = 40;
    std::string recommender = "oracle";
    SweepSection sweep;
};

namespace config_detail {

inline void check_keys(const ojson& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigurationError(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigurationError(where + ": unknown key '" + key + "'");
    }
}

template <class T>
void read(const ojson& j, const std::string& where, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigurationError(where + "." + key + ": wrong type");
    }
}

inline SiteKind site(const std::string& name, const std::string& where) {
    try {
        return parse_site(name);
    } catch (const std::exception&) {
        throw ConfigurationError(where + ": unknown site '" + name + "'");
    }
}

inline const char* mode_name(ControlMode m) { return m == ControlMode::Router ? "router" : "switch"; }

}  // namespace config_detail

/// Reads a run configuration; relative corpus paths resolve against `base_dir`.
inline RunConfig parse_run_config(const ojson& j, const fs::path& base_dir = {}) {
    using namespace config_detail;
    RunConfig c;
    check_keys(j, "config", {"seed", "output_dir", "corpus", "model", "warm_start", "adapter", "train", "probe",
                             "probe_report", "max_new_tokens", "recommender", "sweep"});
    read(j, "config", "seed", c.seed);
    read(j, "config", "output_dir", c.output_dir);
    read(j, "config", "probe_report", c.probe_report);
    read(j, "config", "max_new_tokens", c.max_new_tokens);
    read(j, "config", "recommender", c.recommender);

    auto resolve = [&](std::string& p) {
        if (p.empty()) return;
        fs::path path(p);
        if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
        if (!fs::exists(path)) throw ConfigurationError("config: path does not exist: " + path.string());
        p = fs::absolute(path).lexically_normal().string();
    };
    resolve(c.probe_report);

    if (j.contains("corpus")) {
        const auto& s = j["corpus"];
        check_keys(s, "corpus", {"train", "test", "samples_per_style", "seed", "planted", "train_fraction"});
        read(s, "corpus", "train", c.corpus.train);
        read(s, "corpus", "test", c.corpus.test);
        read(s, "corpus", "samples_per_style", c.corpus.samples_per_style);
        read(s, "corpus", "train_fraction", c.corpus.train_fraction);
        if (s.contains("seed")) c.corpus.seed = s["seed"].get<std::uint64_t>();
        if (s.contains("planted")) {
            check_keys(s["planted"], "corpus.planted", {"layer", "strength"});
            PlantedSpec p;
            read(s["planted"], "corpus.planted", "layer", p.layer);
            read(s["planted"], "corpus.planted", "strength", p.strength);
            c.corpus.planted = p;
        }
        resolve(c.corpus.train);
        resolve(c.corpus.test);
        if (c.corpus.train.empty() && !c.corpus.test.empty()) {
            throw ConfigurationError("corpus: a test file needs a train file");
        }
    }
    if (j.contains("model")) {
        const auto& s = j["model"];
        check_keys(s, "model", {"n_layers", "d_model", "n_heads", "d_ff", "max_seq"});
        read(s, "model", "n_layers", c.model.n_layers);
        read(s, "model", "d_model", c.model.d_model);
        read(s, "model", "n_heads", c.model.n_heads);
        read(s, "model", "d_ff", c.model.d_ff);
        read(s, "model", "max_seq", c.model.max_seq);
    }
    if (j.contains("warm_start")) {
        const auto& s = j["warm_start"];
        check_keys(s, "warm_start", {"steps", "batch_size", "learning_rate", "warmup_ratio"});
        read(s, "warm_start", "steps", c.warm_start.steps);
        read(s, "warm_start", "batch_size", c.warm_start.batch_size);
        read(s, "warm_start", "learning_rate", c.warm_start.learning_rate);
        read(s, "warm_start", "warmup_ratio", c.warm_start.warmup_ratio);
    }
    if (j.contains("adapter")) {
        const auto& s = j["adapter"];
        check_keys(s, "adapter",
                   {"scheme", "rank", "branches", "layers", "sites", "mode", "router_scope", "contrastive_site"});
        std::string scheme = scheme_name(c.adapter.scheme), mode = "switch", scope = "global", csite = "q";
        std::vector<std::string> sites;
        read(s, "adapter", "scheme", scheme);
        read(s, "adapter", "rank", c.adapter.rank);
        read(s, "adapter", "branches", c.adapter.branches);
        read(s, "adapter", "layers", c.adapter.layers);
        read(s, "adapter", "mode", mode);
        read(s, "adapter", "router_scope", scope);
        read(s, "adapter", "contrastive_site", csite);
        try {
            c.adapter.scheme = parse_scheme(scheme);
        } catch (const std::exception&) {
            throw ConfigurationError("adapter.scheme: unknown scheme '" + scheme + "'");
        }
        if (mode != "switch" && mode != "router") throw ConfigurationError("adapter.mode: expected switch or router");
        c.adapter.mode = mode == "router" ? ControlMode::Router : ControlMode::Switch;
        if (scope != "global" && scope != "per_site") throw ConfigurationError("adapter.router_scope: expected global or per_site");
        c.adapter.router_scope = scope == "global" ? RouterScope::Global : RouterScope::PerSite;
        c.adapter.contrastive_site = site(csite, "adapter.contrastive_site");
        if (s.contains("sites")) {
            read(s, "adapter", "sites", sites);
            c.adapter.sites.clear();
            for (const auto& n : sites) c.adapter.sites.push_back(site(n, "adapter.sites"));
        }
    }
    if (j.contains("train")) {
        const auto& s = j["train"];
        check_keys(s, "train", {"batch_size", "learning_rate", "epochs", "steps", "lambda", "tau", "warmup_ratio",
                                "weight_decay"});
        read(s, "train", "batch_size", c.train.batch_size);
        read(s, "train", "learning_rate", c.train.learning_rate);
        read(s, "train", "epochs", c.train.epochs);
        read(s, "train", "steps", c.train.steps);
        read(s, "train", "lambda", c.train.lambda);
        read(s, "train", "tau", c.train.tau);
        read(s, "train", "warmup_ratio", c.train.warmup_ratio);
        read(s, "train", "weight_decay", c.train.weight_decay);
    }
    if (j.contains("probe")) {
        const auto& s = j["probe"];
        check_keys(s, "probe", {"negatives_per_positive", "k", "include_embedding_layer", "steps", "learning_rate",
                                "train_fraction"});
        read(s, "probe", "negatives_per_positive", c.probe.negatives_per_positive);
        read(s, "probe", "k", c.probe.k);
        read(s, "probe", "include_embedding_layer", c.probe.include_embedding_layer);
        read(s, "probe", "steps", c.probe.fit.steps);
        read(s, "probe", "learning_rate", c.probe.fit.learning_rate);
        read(s, "probe", "train_fraction", c.probe.fit.train_fraction);
    }
    if (j.contains("sweep")) {
        const auto& s = j["sweep"];
        check_keys(s, "sweep", {"axis", "values"});
        read(s, "sweep", "axis", c.sweep.axis);
        if (s.contains("values")) c.sweep.values = s["values"];
    }
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot read config " + path.string());
    ojson j;
    try {
        j = ojson::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError("malformed config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

inline ojson to_json(const RunConfig& c) {
    using config_detail::mode_name;
    ojson j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    ojson corpus;
    corpus["train"] = c.corpus.train;
    corpus["test"] = c.corpus.test;
    corpus["samples_per_style"] = c.corpus.samples_per_style;
    if (c.corpus.seed) corpus["seed"] = *c.corpus.seed;
    if (c.corpus.planted) corpus["planted"] = {{"layer", c.corpus.planted->layer}, {"strength", c.corpus.planted->strength}};
    corpus["train_fraction"] = c.corpus.train_fraction;
    j["corpus"] = corpus;
    j["model"] = {{"n_layers", c.model.n_layers}, {"d_model", c.model.d_model}, {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff}, {"max_seq", c.model.max_seq}};
    j["warm_start"] = {{"steps", c.warm_start.steps}, {"batch_size", c.warm_start.batch_size},
                       {"learning_rate", c.warm_start.learning_rate}, {"warmup_ratio", c.warm_start.warmup_ratio}};
    std::vector<std::string> sites;
    for (auto s : c.adapter.sites) sites.push_back(site_name(s));
    j["adapter"] = {{"scheme", scheme_name(c.adapter.scheme)},
                    {"rank", c.adapter.rank},
                    {"branches", c.adapter.branches},
                    {"layers", c.adapter.layers},
                    {"sites", sites},
                    {"mode", mode_name(c.adapter.mode)},
                    {"router_scope", c.adapter.router_scope == RouterScope::Global ? "global" : "per_site"},
                    {"contrastive_site", site_name(c.adapter.contrastive_site)}};
    j["train"] = {{"batch_size", c.train.batch_size}, {"learning_rate", c.train.learning_rate},
                  {"epochs", c.train.epochs},         {"steps", c.train.steps},
                  {"lambda", c.train.lambda},         {"tau", c.train.tau},
                  {"warmup_ratio", c.train.warmup_ratio}, {"weight_decay", c.train.weight_decay}};
    j["probe"] = {{"negatives_per_positive", c.probe.negatives_per_positive}, {"k", c.probe.k},
                  {"include_embedding_layer", c.probe.include_embedding_layer}, {"steps", c.probe.fit.steps},
                  {"learning_rate", c.probe.fit.learning_rate}, {"train_fraction", c.probe.fit.train_fraction}};
    j["probe_report"] = c.probe_report;
    j["max_new_tokens"] = c.max_new_tokens;
    j["recommender"] = c.recommender;
    j["sweep"] = {{"axis", c.sweep.axis}, {"values", c.sweep.values}};
    return j;
}

// ---------------------------------------------------------------------------
// Data and models

struct Dataset {
    PairedCorpus train, test;
    Tokenizer tok;
    std::vector<std::string> styles;  // branch i serves styles[i]
    std::vector<EncodedSample> train_enc, test_enc;
};

/// Encodes `corpus`; samples whose style has no branch raise a routing error
/// naming them.
inline std::vector<EncodedSample> encode_for_branches(const PairedCorpus& corpus, const Tokenizer& tok,
                                                      const std::vector<std::string>& styles) {
    std::string missing;
    for (const auto& s : corpus)
        if (std::find(styles.begin(), styles.end(), s.style) == styles.end()) missing += (missing.empty() ? "" : ", ") + s.id;
    if (!missing.empty()) throw RoutingError("samples with a style that has no branch: " + missing);
    return encode_corpus(corpus, tok, styles);
}

inline Dataset load_dataset(const RunConfig& cfg, std::optional<Tokenizer> vocab = std::nullopt) {
    Dataset d;
    if (cfg.corpus.train.empty()) {
        SynthSpec spec{default_styles(), cfg.corpus.samples_per_style, cfg.corpus.seed.value_or(cfg.seed),
                       cfg.corpus.planted};
        auto sp = split(synth_corpus(spec), cfg.corpus.train_fraction, cfg.seed);
        d.train = std::move(sp.train);
        d.test = std::move(sp.test);
    } else if (cfg.corpus.test.empty()) {
        auto sp = split(load_jsonl(cfg.corpus.train), cfg.corpus.train_fraction, cfg.seed);
        d.train = std::move(sp.train);
        d.test = std::move(sp.test);
    } else {
        d.train = load_jsonl(cfg.corpus.train);
        d.test = load_jsonl(cfg.corpus.test);
    }
    d.tok = vocab ? std::move(*vocab) : build_vocab(d.train);
    d.styles = style_labels(d.train);
    d.train_enc = encode_for_branches(d.train, d.tok, d.styles);
    d.test_enc = encode_for_branches(d.test, d.tok, d.styles);
    return d;
}

inline ModelConfig model_config(const RunConfig& cfg, std::size_t vocab_size) {
    ModelConfig m;
    m.n_layers = cfg.model.n_layers;
    m.d_model = cfg.model.d_model;
    m.n_heads = cfg.model.n_heads;
    m.d_ff = cfg.model.d_ff;
    m.max_seq = cfg.model.max_seq;
    m.vocab_size = vocab_size;
    m.seed = cfg.seed;
    return m;
}

inline void plant_if_configured(Transformer& base, const RunConfig& cfg) {
    if (cfg.corpus.planted) {
        base.set_planted_signal(make_planted_signal(*cfg.corpus.planted, cfg.model.d_model, cfg.seed));
    }
}

/// Freshly initialized backbone after the warm start; frozen.
inline std::shared_ptr<Transformer> build_base(const RunConfig& cfg, const Dataset& data) {
    auto base = std::make_shared<Transformer>(model_config(cfg, data.tok.size()));
    if (cfg.warm_start.steps > 0) {
        auto w = cfg.warm_start;
        w.seed = cfg.seed;
        warm_start(*base, data.train_enc, w);
    }
    base->set_trainable(false);
    plant_if_configured(*base, cfg);
    return base;
}

inline AttachSpec attach_spec(const RunConfig& cfg, std::size_t n_styles) {
    AttachSpec s;
    s.layers = cfg.adapter.layers;
    s.sites = cfg.adapter.sites;
    s.rank = cfg.adapter.rank;
    s.scheme = cfg.adapter.scheme;
    s.branches = cfg.adapter.scheme == Scheme::Lora ? 1 : (cfg.adapter.branches ? cfg.adapter.branches : n_styles);
    s.mode = cfg.adapter.mode;
    s.router_scope = cfg.adapter.router_scope;
    s.contrastive_site = cfg.adapter.contrastive_site;
    s.seed = cfg.seed;
    return s;
}

/// Training samples as the adapter sees them: a single-branch adapter serves
/// every style with branch 0.
inline std::vector<EncodedSample> samples_for(const AdaptedModel& m, std::vector<EncodedSample> data) {
    if (m.branches() == 1)
        for (auto& s : data) s.style = 0;
    return data;
}

inline TrainConfig train_config(const RunConfig& cfg, std::vector<std::size_t> semantic_layers) {
    TrainConfig t = cfg.train;
    t.semantic_layers = std::move(semantic_layers);
    t.seed = cfg.seed;
    return t;
}

inline ProbeReport run_probe(const Transformer& base, const Dataset& data, const RunConfig& cfg) {
    return probe_layers(base, data.train_enc, cfg.probe, cfg.seed);
}

// ---------------------------------------------------------------------------
// Recommenders and generation

/// Builds a recommender from `oracle`, `sim:<p>` or `exec:<command>`. The
/// truth table covers every sample of the dataset.
inline std::unique_ptr<Recommender> make_recommender(const std::string& spec, const Dataset& data,
                                                     std::uint64_t seed) {
    std::map<std::string, std::string> truth;
    for (const auto* c : {&data.train, &data.test})
        for (const auto& s : *c) truth[s.id] = s.style;
    if (spec == "oracle") return std::make_unique<OracleRecommender>(std::move(truth));
    if (spec.rfind("sim:", 0) == 0) {
        double p = 0.0;
        try {
            std::size_t used = 0;
            p = std::stod(spec.substr(4), &used);
            if (used != spec.size() - 4) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw ConfigurationError("recommender: cannot parse accuracy in '" + spec + "'");
        }
        return std::make_unique<SimulatedRecommender>(SimulatedAgent(p, derive_seed(seed, 0x5E1)), std::move(truth));
    }
    if (spec.rfind("exec:", 0) == 0 && spec.size() > 5) return std::make_unique<ExecRecommender>(spec.substr(5));
    throw ConfigurationError("recommender: expected oracle, sim:<p> or exec:<command>, got '" + spec + "'");
}

struct Generation {
    std::string id;
    std::string style;   // true style
    std::string chosen;  // style whose branch produced the text
    std::string generated;
    std::string reference;
};

/// Prompt [expert ; SEP] with the expert text cut to half the context.
inline std::vector<TokenId> prompt_tokens(std::span<const TokenId> expert, std::size_t max_seq) {
    std::vector<TokenId> p(expert.begin(), expert.begin() + static_cast<std::ptrdiff_t>(std::min(expert.size(), max_seq / 2)));
    p.push_back(Tokenizer::kSep);
    return p;
}

/// Greedy generation for every test sample; the recommender picks the branch
/// in switch mode, the router in router mode, branch 0 for one branch.
inline std::vector<Generation> generate_all(const AdaptedModel& m, const Dataset& data, Recommender* rec,
                                            std::size_t max_new_tokens) {
    std::vector<Generation> out;
    const std::size_t max_seq = m.base().config().max_seq;
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        const auto& s = data.test[i];
        const auto prompt = prompt_tokens(data.test_enc[i].expert, max_seq);
        const std::size_t budget = std::min(max_new_tokens, max_seq - prompt.size());
        Generation g{s.id, s.style, s.style, "", s.lay};
        std::vector<TokenId> full;
        if (m.spec().mode == ControlMode::Router) {
            const auto alphas = m.router_alphas(std::span<const TokenId>(prompt).first(prompt.size() - 1));
            g.chosen = data.styles.at(std::min(argmax(alphas[0].data()), data.styles.size() - 1));
            full = m.generate(prompt, budget, Tokenizer::kEos, alphas);
        } else if (m.branches() == 1) {
            g.chosen = "*";
            full = m.generate(prompt, budget, Tokenizer::kEos, BranchControl::switch_to(0, 1));
        } else {
            if (!rec) throw ConfigurationError("switch mode needs a recommender");
            g.chosen = rec->recommend({s.id, s.expert, data.styles});
            const auto branch = candidate_index(data.styles, g.chosen);
            full = m.generate(prompt, budget, Tokenizer::kEos, BranchControl::switch_to(branch, m.branches()));
        }
        g.generated = data.tok.decode(std::span<const TokenId>(full).subspan(prompt.size()));
        out.push_back(std::move(g));
    }
    return out;
}

struct ScoreSummary {
    std::size_t n = 0;
    TextScores mean;
};

/// Per-style and overall (key "overall") mean scores.
inline std::map<std::string, ScoreSummary> summarize(const std::vector<Generation>& gens) {
    std::map<std::string, ScoreSummary> acc;
    for (const auto& g : gens) {
        const auto s = score_text(g.generated, g.reference);
        for (const auto& key : {g.style, std::string("overall")}) {
            auto& a = acc[key];
            ++a.n;
            a.mean.rouge1 += s.rouge1;
            a.mean.rouge2 += s.rouge2;
            a.mean.rougeL += s.rougeL;
            a.mean.bleu += s.bleu;
        }
    }
    for (auto& [k, a] : acc) {
        const double n = static_cast<double>(a.n);
        a.mean.rouge1 /= n;
        a.mean.rouge2 /= n;
        a.mean.rougeL /= n;
        a.mean.bleu /= n;
    }
    return acc;
}

inline Table metrics_table(const std::vector<Generation>& gens) {
    Table t;
    t.header = {"style", "n", "rouge1", "rouge2", "rougeL", "bleu"};
    const auto s = summarize(gens);
    auto row = [&](const std::string& k, const ScoreSummary& v) {
        t.add({k, std::to_string(v.n), num(v.mean.rouge1), num(v.mean.rouge2), num(v.mean.rougeL), num(v.mean.bleu)});
    };
    for (const auto& [k, v] : s)
        if (k != "overall") row(k, v);
    if (s.count("overall")) row("overall", s.at("overall"));
    return t;
}

inline std::string generations_jsonl(const std::vector<Generation>& gens) {
    std::string out;
    for (const auto& g : gens) {
        ojson j{{"id", g.id}, {"style", g.style}, {"chosen", g.chosen}, {"generated", g.generated}, {"reference", g.reference}};
        out += j.dump() + "\n";
    }
    return out;
}

inline std::vector<Generation> parse_generations(const std::string& text) {
    std::vector<Generation> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = ojson::parse(line);
        out.push_back({j.at("id"), j.at("style"), j.at("chosen"), j.at("generated"), j.at("reference")});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Analyses

/// Mean over held-out pairs and layers of cos(A·e, A·l): e is the mean hidden
/// state over expert positions of the adapted forward under the sample's
/// branch, l the mean frozen-backbone hidden state of the lay text, A the
/// layer's shared projection.
inline std::vector<double> projected_similarity(const AdaptedModel& m, const std::vector<EncodedSample>& data,
                                                std::span<const std::size_t> layers) {
    NoGradGuard no_grad;
    std::vector<double> per_layer(layers.size(), 0.0);
    for (const auto& e : data) {
        const auto seq = lm_sequence(e, m.base().config().max_seq);
        const auto branch = m.branches() == 1 ? 0 : e.style;
        const auto fr = m.forward(seq.tokens, BranchControl::switch_to(branch, m.branches()), false);
        const auto lay = pooled_layer_features(m.base(), e.lay, layers);
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& a = m.projection(layers[k]);
            const auto anchor = project_row(mean_rows(fr.acts.layers[layers[k]], 0, seq.expert_len), a);
            per_layer[k] += cosine_similarity(anchor, project_row(lay[k], a)).item();
        }
    }
    for (auto& v : per_layer) v /= static_cast<double>(data.size());
    return per_layer;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Mean hidden states at `layer`: expert positions of the adapted forward and
/// the generated lay positions of each generation.
inline std::pair<Matrix, Matrix> expert_and_generated_states(const AdaptedModel& m, const Dataset& data,
                                                             const std::vector<Generation>& gens, std::size_t layer) {
    NoGradGuard no_grad;
    Matrix expert, lay;
    const std::size_t max_seq = m.base().config().max_seq;
    for (std::size_t i = 0; i < gens.size(); ++i) {
        const auto prompt = prompt_tokens(data.test_enc[i].expert, max_seq);
        auto tokens = prompt;
        for (auto t : data.tok.encode(gens[i].generated))
            if (tokens.size() < max_seq) tokens.push_back(t);
        if (tokens.size() == prompt.size()) continue;
        const auto branch = m.branches() == 1 ? 0 : candidate_index(data.styles, gens[i].chosen == "*" ? data.styles[0] : gens[i].chosen);
        const auto fr = m.forward(tokens, BranchControl::switch_to(m.branches() == 1 ? 0 : branch, m.branches()), false);
        const auto& h = fr.acts.layers.at(layer);
        expert.push_back(mean_rows(h, 0, prompt.size() - 1).values());
        lay.push_back(mean_rows(h, prompt.size(), tokens.size()).values());
    }
    return {expert, lay};
}

// ---------------------------------------------------------------------------
// Run directories and checkpoints

inline std::string fnv_hex(const std::string& bytes) { return text_hash(bytes); }

/// Output directory of one command: `--out` if given, else a timestamped
/// directory under $MAGICAL_OUT or the configured output_dir.
inline fs::path resolve_run_dir(const std::optional<std::string>& out_flag, const RunConfig& cfg,
                                const std::string& command) {
    if (out_flag) return *out_flag;
    std::string root = cfg.output_dir;
    if (const char* env = std::getenv("MAGICAL_OUT"); env && *env) root = env;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream name;
    name << command << "-seed" << cfg.seed << "-" << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
    return fs::path(root) / name.str();
}

/// Number of worker threads requested through $MAGICAL_THREADS (default 1).
inline std::size_t requested_threads() {
    const char* env = std::getenv("MAGICAL_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigurationError("MAGICAL_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

class RunDir {
public:
    RunDir(fs::path dir, std::string command, const RunConfig& cfg) : dir_(std::move(dir)), command_(std::move(command)), cfg_(cfg) {
        fs::create_directories(dir_);
    }

    const fs::path& path() const { return dir_; }

    void write(const std::string& name, const std::string& content) {
        write_text((dir_ / name).string(), content);
        artifacts_.emplace_back(name, fnv_hex(content));
    }

    void note_directory(const std::string& name) {
        std::string digest;
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir_ / name))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) digest += fs::relative(f, dir_).string() + ":" + fnv_hex(read_text(f.string())) + ";";
        artifacts_.emplace_back(name + "/", fnv_hex(digest));
    }

    /// Writes manifest.json; contains no timestamps so reruns compare equal.
    void finish(const ojson& extra = ojson::object()) {
        ojson m;
        m["command"] = command_;
        m["seed"] = cfg_.seed;
        m["threads"] = requested_threads();
        m["config"] = to_json(cfg_);
        ojson arts = ojson::array();
        for (const auto& [name, hash] : artifacts_) arts.push_back({{"name", name}, {"fnv1a64", hash}});
        m["artifacts"] = arts;
        m["extra"] = extra;
        write_text((dir_ / "manifest.json").string(), m.dump(2) + "\n");
    }

private:
    fs::path dir_;
    std::string command_;
    RunConfig cfg_;
    std::vector<std::pair<std::string, std::string>> artifacts_;
};

inline Checkpoint export_tensors(const std::vector<NamedTensor>& params, DType dtype) {
    Checkpoint c;
    c.dtype = dtype;
    for (const auto& p : params) c.tensors.push_back({p.name, p.tensor.clone()});
    return c;
}

struct LoadedRun {
    RunConfig cfg;
    Dataset data;
    std::shared_ptr<Transformer> base;
    std::unique_ptr<AdaptedModel> model;
    std::vector<std::size_t> semantic_layers;
};

inline std::vector<std::string> read_vocab(const fs::path& file) {
    std::vector<std::string> v;
    std::istringstream in(read_text(file.string()));
    std::string line;
    while (std::getline(in, line)) v.push_back(line);
    return v;
}

/// Rebuilds the models of a training run directory from its checkpoints.
inline LoadedRun load_run(const fs::path& dir) {
    if (!fs::exists(dir / "config.json")) throw CheckpointError("not a training run directory: " + dir.string());
    LoadedRun r;
    r.cfg = parse_run_config(ojson::parse(read_text((dir / "config.json").string())));
    r.data = load_dataset(r.cfg, Tokenizer(read_vocab(dir / "vocab.txt")));
    r.base = std::make_shared<Transformer>(model_config(r.cfg, r.data.tok.size()));
    restore_into(r.base->parameters(), load_checkpoint(dir / "base"));
    r.base->set_trainable(false);
    plant_if_configured(*r.base, r.cfg);
    const auto adapter = load_checkpoint(dir / "adapter");
    r.model = std::make_unique<AdaptedModel>(r.base, attach_spec(r.cfg, r.data.styles.size()));
    restore_into(r.model->trainable_parameters(), adapter);
    r.semantic_layers = adapter.meta.value("semantic_layers", std::vector<std::size_t>{});
    return r;
}

// ---------------------------------------------------------------------------
// Commands

inline std::string vocab_text(const Tokenizer& tok) {
    std::string s;
    for (const auto& t : tok.vocabulary()) s += t + "\n";
    return s;
}

inline ProbeReport cmd_probe(const RunConfig& cfg, RunDir& run) {
    const auto data = load_dataset(cfg);
    const auto base = build_base(cfg, data);
    const auto report = run_probe(*base, data, cfg);
    run.write("probe_report.tsv", report.to_tsv());
    run.finish({{"pairs", report.pairs}, {"truncated_pairs", report.truncated_pairs}});
    return report;
}

struct TrainOptions {
    std::optional<std::string> probe_report;  // overrides the config's path
    std::optional<std::string> resume;        // run directory holding resume/
    std::optional<std::size_t> stop_after;    // leave the run resumable after this many steps
};

inline TrainLog cmd_train(const RunConfig& cfg_in, RunDir& run, const TrainOptions& opt = {}) {
    RunConfig cfg = cfg_in;
    if (opt.probe_report) cfg.probe_report = *opt.probe_report;
    std::vector<std::size_t> layers;
    if (cfg.train.lambda > 0.0) {
        if (cfg.probe_report.empty()) {
            throw ConfigurationError("train: a positive contrastive weight needs a probe report (--probe or probe_report)");
        }
        layers = ProbeReport::from_tsv(read_text(cfg.probe_report)).selected;
    }
    const auto data = load_dataset(cfg);
    const auto base = build_base(cfg, data);
    AdaptedModel model(base, attach_spec(cfg, data.styles.size()));
    Trainer trainer(model, samples_for(model, data.train_enc), train_config(cfg, layers));
    if (opt.resume) trainer.restore(load_checkpoint(fs::path(*opt.resume) / "resume"));
    trainer.run(opt.stop_after ? *opt.stop_after : trainer.total_steps());

    run.write("config.json", to_json(cfg).dump(2) + "\n");
    run.write("vocab.txt", vocab_text(data.tok));
    std::string log_text = trainer.log().to_tsv();
    if (opt.resume) {
        // Continue the earlier log: its rows followed by the new ones, one header.
        const auto previous = read_text((fs::path(*opt.resume) / "train_log.tsv").string());
        log_text = previous + log_text.substr(log_text.find('\n') + 1);
    }
    run.write("train_log.tsv", log_text);
    save_checkpoint(run.path() / "base", export_tensors(base->parameters(), DType::Float32));
    auto adapter = export_tensors(model.trainable_parameters(), DType::Float32);
    adapter.meta["scheme"] = scheme_name(model.spec().scheme);
    adapter.meta["rank"] = model.spec().rank;
    adapter.meta["branches"] = model.branches();
    adapter.meta["styles"] = data.styles;
    adapter.meta["semantic_layers"] = layers;
    adapter.meta["step"] = trainer.current_step();
    save_checkpoint(run.path() / "adapter", adapter);
    save_checkpoint(run.path() / "resume", trainer.resume_state());
    for (const char* d : {"base", "adapter", "resume"}) run.note_directory(d);
    run.finish({{"steps_done", trainer.current_step()}, {"total_steps", trainer.total_steps()}});
    return trainer.log();
}

struct EvaluateOptions {
    std::string recommender = "oracle";
    bool gold = false;  // score the references against themselves
};

inline Table cmd_evaluate(const fs::path& checkpoint, RunDir& run, const EvaluateOptions& opt) {
    auto loaded = load_run(checkpoint);
    std::vector<Generation> gens;
    if (opt.gold) {
        for (const auto& s : loaded.data.test) gens.push_back({s.id, s.style, s.style, s.lay, s.lay});
    } else {
        auto rec = make_recommender(opt.recommender, loaded.data, loaded.cfg.seed);
        gens = generate_all(*loaded.model, loaded.data, rec.get(), loaded.cfg.max_new_tokens);
    }
    const auto table = metrics_table(gens);
    run.write("generations.jsonl", generations_jsonl(gens));
    run.write("metrics.tsv", table.to_tsv());
    run.finish({{"checkpoint", fs::absolute(checkpoint).lexically_normal().string()}, {"recommender", opt.recommender}});
    return table;
}

inline std::string cmd_generate(const fs::path& checkpoint, const std::string& expert_text, const std::string& style,
                                const std::string& recommender) {
    auto loaded = load_run(checkpoint);
    const auto& m = *loaded.model;
    const auto prompt = prompt_tokens(loaded.data.tok.encode(expert_text), m.base().config().max_seq);
    const std::size_t budget = std::min(loaded.cfg.max_new_tokens, m.base().config().max_seq - prompt.size());
    std::vector<TokenId> full;
    if (m.spec().mode == ControlMode::Router) {
        full = m.generate(prompt, budget, Tokenizer::kEos,
                          m.router_alphas(std::span<const TokenId>(prompt).first(prompt.size() - 1)));
    } else if (m.branches() == 1) {
        full = m.generate(prompt, budget, Tokenizer::kEos, BranchControl::switch_to(0, 1));
    } else {
        std::string chosen = style;
        if (chosen.empty()) {
            if (recommender.rfind("exec:", 0) != 0) {
                throw ConfigurationError("generate: give --style or an exec: recommender for free text");
            }
            auto rec = make_recommender(recommender, loaded.data, loaded.cfg.seed);
            chosen = rec->recommend({"", expert_text, loaded.data.styles});
        }
        full = m.generate(prompt, budget, Tokenizer::kEos,
                          BranchControl::switch_to(candidate_index(loaded.data.styles, chosen), m.branches()));
    }
    return loaded.data.tok.decode(std::span<const TokenId>(full).subspan(prompt.size()));
}

inline std::string matrix_tsv(const Matrix& c) {
    Table t;
    t.header = {"row"};
    for (std::size_t b = 0; b < (c.empty() ? 0 : c[0].size()); ++b) t.header.push_back("c" + std::to_string(b));
    for (std::size_t a = 0; a < c.size(); ++a) {
        std::vector<std::string> row{std::to_string(a)};
        for (double v : c[a]) row.push_back(num(v));
        t.add(std::move(row));
    }
    return t.to_tsv();
}

/// Point clouds, A-projected cross-correlation, projected similarity and the
/// branch confusion matrix. `compare` is an optional second run (typically
/// trained without the semantic constraint).
inline void cmd_analyze(const fs::path& checkpoint, const std::optional<fs::path>& compare, RunDir& run,
                        const std::string& recommender, std::ostream& warnings) {
    Table clouds;
    clouds.header = {"x", "y", "group"};
    Table sim;
    sim.header = {"variant", "layer", "mean_cosine"};
    std::vector<std::pair<std::string, fs::path>> variants{{"primary", checkpoint}};
    if (compare) {
        variants.emplace_back("compare", *compare);
    } else {
        warnings << "analyze: no comparison checkpoint given; running single-sided\n";
    }
    for (const auto& [variant, dir] : variants) {
        auto loaded = load_run(dir);
        const auto& m = *loaded.model;
        std::vector<std::size_t> layers = loaded.semantic_layers;
        if (layers.empty()) layers = {loaded.cfg.model.n_layers};
        auto rec = make_recommender(recommender, loaded.data, loaded.cfg.seed);
        const auto gens = generate_all(m, loaded.data, rec.get(), loaded.cfg.max_new_tokens);

        const auto [expert, lay] = expert_and_generated_states(m, loaded.data, gens, layers.back());
        try {
            const auto sub = semantic_subspace(expert, lay);
            for (std::size_t i = 0; i < sub.expert_points.size(); ++i) {
                clouds.add({num(sub.expert_points[i].first), num(sub.expert_points[i].second), variant + ":expert"});
                clouds.add({num(sub.lay_points[i].first), num(sub.lay_points[i].second), variant + ":lay"});
            }
        } catch (const DegenerateSubspaceError& e) {
            warnings << "analyze: " << variant << ": " << e.what() << "\n";
        }

        const auto per_layer = projected_similarity(m, loaded.data.test_enc, layers);
        for (std::size_t k = 0; k < layers.size(); ++k) sim.add({variant, std::to_string(layers[k]), num(per_layer[k])});
        sim.add({variant, "mean", num(mean_of(per_layer))});

        if (variant == "primary") {
            Matrix pe, pl;
            NoGradGuard no_grad;
            const auto& a = m.projection(layers.front());
            for (std::size_t i = 0; i < expert.size(); ++i) {
                pe.push_back(project_row(Tensor({expert[i].size()}, expert[i]), a).values());
                pl.push_back(project_row(Tensor({lay[i].size()}, lay[i]), a).values());
            }
            if (!pe.empty()) run.write("cross_correlation.tsv", matrix_tsv(cross_correlation(pe, pl).c));
            std::vector<std::size_t> pred, truth;
            for (const auto& g : gens) {
                if (g.chosen == "*") continue;
                pred.push_back(candidate_index(loaded.data.styles, g.chosen));
                truth.push_back(candidate_index(loaded.data.styles, g.style));
            }
            Table conf;
            conf.header = {"true\\chosen"};
            for (const auto& s : loaded.data.styles) conf.header.push_back(s);
            const auto cm = confusion_matrix(pred, truth, loaded.data.styles.size());
            for (std::size_t t = 0; t < cm.size(); ++t) {
                std::vector<std::string> row{loaded.data.styles[t]};
                for (auto v : cm[t]) row.push_back(std::to_string(v));
                conf.add(std::move(row));
            }
            run.write("confusion.tsv", conf.to_tsv());
            PairedCorpus all = loaded.data.train;
            all.insert(all.end(), loaded.data.test.begin(), loaded.data.test.end());
            run.write("heterogeneity.tsv", heterogeneity_report(all).to_tsv());
        }
    }
    run.write("subspace.tsv", clouds.to_tsv());
    run.write("similarity.tsv", sim.to_tsv());
    run.finish();
}

/// Per-site trainable counts for the three schemes and the reduction of the
/// shared-projection scheme relative to independent branches.
inline Table paramcount_table(const RunConfig& cfg, std::size_t n_styles) {
    ModelConfig mc = model_config(cfg, 1);
    const auto spec = attach_spec(cfg, n_styles);
    const std::size_t n = cfg.adapter.branches ? cfg.adapter.branches : n_styles;
    const std::size_t r = cfg.adapter.rank;
    std::vector<std::size_t> layers = spec.layers;
    if (layers.empty())
        for (std::size_t l = 1; l <= mc.n_layers; ++l) layers.push_back(l);
    Table t;
    t.header = {"site", "d", "k", "lora", "multi_lora", "magical", "reduction_pct"};
    std::size_t tl = 0, tm = 0, tg = 0;
    auto pct = [](std::size_t multi, std::size_t mag) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << (multi ? 100.0 * static_cast<double>(multi - mag) / static_cast<double>(multi) : 0.0);
        return os.str();
    };
    for (auto l : layers)
        for (auto s : spec.sites) {
            const auto [d, k] = site_shape(mc, s);
            const auto pl = param_count(d, k, r, 1, 1, Scheme::Lora);
            const auto pm = param_count(d, k, r, n, 1, Scheme::MultiLora);
            const auto pg = param_count(d, k, r, n, 1, Scheme::Magical);
            tl += pl;
            tm += pm;
            tg += pg;
            t.add({"L" + std::to_string(l) + "." + site_name(s), std::to_string(d), std::to_string(k), std::to_string(pl),
                   std::to_string(pm), std::to_string(pg), pct(pm, pg)});
        }
    t.add({"total", "-", "-", std::to_string(tl), std::to_string(tm), std::to_string(tg), pct(tm, tg)});
    return t;
}

inline Table cmd_paramcount(const RunConfig& cfg, RunDir& run) {
    const std::size_t styles = cfg.corpus.train.empty() ? default_styles().size() : style_labels(load_jsonl(cfg.corpus.train)).size();
    const auto t = paramcount_table(cfg, styles);
    run.write("paramcount.tsv", t.to_tsv());
    run.finish();
    return t;
}

/// Trainable count of `scheme` at rank r with n branches over the configured sites.
inline std::size_t configured_params(const RunConfig& cfg, Scheme scheme, std::size_t r, std::size_t n) {
    const ModelConfig mc = model_config(cfg, 1);
    const std::size_t layers = cfg.adapter.layers.empty() ? mc.n_layers : cfg.adapter.layers.size();
    std::size_t total = 0;
    for (auto s : cfg.adapter.sites) {
        const auto [d, k] = site_shape(mc, s);
        total += layers * param_count(d, k, r, scheme == Scheme::Lora ? 1 : n, 1, scheme);
    }
    return total;
}

/// One row per sweep point; all points share the run seed and the warm-started backbone.
inline Table cmd_sweep(const RunConfig& cfg, RunDir& run, const std::optional<std::string>& probe_report = std::nullopt) {
    const auto& axis = cfg.sweep.axis;
    if (axis != "rank" && axis != "recommender_accuracy" && axis != "scheme") {
        throw ConfigurationError("sweep.axis must be rank, recommender_accuracy or scheme");
    }
    if (!cfg.sweep.values.is_array() || cfg.sweep.values.empty()) throw ConfigurationError("sweep.values must be a non-empty list");

    const auto data = load_dataset(cfg);
    const std::size_t n = cfg.adapter.branches ? cfg.adapter.branches : data.styles.size();

    struct Point {
        std::string value;
        RunConfig cfg;
        std::string recommender;
    };
    std::vector<Point> points;
    for (const auto& v : cfg.sweep.values) {
        Point p{v.is_string() ? v.get<std::string>() : v.dump(), cfg, cfg.recommender};
        if (axis == "rank") {
            p.cfg.adapter.rank = v.get<std::size_t>();
        } else if (axis == "recommender_accuracy") {
            p.recommender = "sim:" + num(v.get<double>());
        } else {
            // A value is a scheme name or {"scheme": name, "rank": r}. Without an
            // explicit rank, single-LoRA gets N times the branch rank.
            if (v.is_object()) {
                config_detail::check_keys(v, "sweep.values[]", {"scheme", "rank"});
                p.value = v.dump();
                p.cfg.adapter.scheme = parse_scheme(v.at("scheme").get<std::string>());
                if (p.cfg.adapter.scheme == Scheme::Lora) p.cfg.adapter.rank = cfg.adapter.rank * n;
                config_detail::read(v, "sweep.values[]", "rank", p.cfg.adapter.rank);
            } else {
                p.cfg.adapter.scheme = parse_scheme(v.get<std::string>());
                if (p.cfg.adapter.scheme == Scheme::Lora) p.cfg.adapter.rank = cfg.adapter.rank * n;
            }
            if (p.cfg.adapter.scheme == Scheme::MultiLora) p.cfg.train.lambda = 0.0;
        }
        points.push_back(std::move(p));
    }
    if (axis == "scheme") {
        std::optional<std::size_t> lora, multi;
        for (const auto& p : points) {
            const auto c = configured_params(p.cfg, p.cfg.adapter.scheme, p.cfg.adapter.rank, n);
            if (p.cfg.adapter.scheme == Scheme::Lora) lora = c;
            if (p.cfg.adapter.scheme == Scheme::MultiLora) multi = c;
        }
        if (lora && multi && *lora != *multi) {
            throw ParityError("scheme sweep: single-LoRA has " + std::to_string(*lora) + " trainables, multi-LoRA " +
                              std::to_string(*multi));
        }
    }

    std::vector<std::size_t> layers;
    const std::string report = probe_report.value_or(cfg.probe_report);
    const auto base = build_base(cfg, data);
    if (!report.empty()) {
        layers = ProbeReport::from_tsv(read_text(report)).selected;
    } else if (cfg.train.lambda > 0.0) {
        layers = run_probe(*base, data, cfg).selected;
    }

    Table t;
    t.header = {"axis", "value", "scheme", "rank", "branches", "lambda", "trainable_params", "final_lm_loss",
                "rouge1", "rouge2", "rougeL", "bleu"};
    std::unique_ptr<AdaptedModel> shared;  // the recommender axis trains once
    TrainLog shared_log;
    for (const auto& p : points) {
        std::unique_ptr<AdaptedModel> owned;
        TrainLog log;
        if (!shared || axis != "recommender_accuracy") {
            owned = std::make_unique<AdaptedModel>(base, attach_spec(p.cfg, data.styles.size()));
            const auto tc = train_config(p.cfg, p.cfg.train.lambda > 0.0 ? layers : std::vector<std::size_t>{});
            log = train(*owned, samples_for(*owned, data.train_enc), tc);
            if (axis == "recommender_accuracy") {
                shared = std::move(owned);
                shared_log = log;
            }
        }
        const AdaptedModel& m = owned ? *owned : *shared;
        const TrainLog& lg = owned ? log : shared_log;
        auto rec = make_recommender(p.recommender, data, cfg.seed);
        const auto s = summarize(generate_all(m, data, rec.get(), cfg.max_new_tokens)).at("overall");
        double tail = 0.0;
        const std::size_t w = std::min<std::size_t>(10, lg.rows.size());
        for (std::size_t i = lg.rows.size() - w; i < lg.rows.size(); ++i) tail += lg.rows[i].lm_loss / static_cast<double>(w);
        t.add({axis, p.value, scheme_name(m.spec().scheme), std::to_string(m.spec().rank), std::to_string(m.branches()),
               num(p.cfg.train.lambda), std::to_string(m.trainable_count()), num(tail), num(s.mean.rouge1),
               num(s.mean.rouge2), num(s.mean.rougeL), num(s.mean.bleu)});
    }
    run.write("sweep.tsv", t.to_tsv());
    run.finish();
    return t;
}

}  // namespace magical
