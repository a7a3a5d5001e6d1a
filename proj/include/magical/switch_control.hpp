// SPDX-License-Identifier: Apache-2.0
//
// Branch-control policies: hard one-hot switching, soft routing through a
// learned gate, and the recommendation boundary that tells the switch which
// lay style to use at inference.

#pragma once

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "magical/model.hpp"
#include "magical/random.hpp"
#include "magical/tensor.hpp"

namespace magical {

struct ControlError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct RoutingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ControlMode { Switch, Router, Off };

/// Branch participation weights α. Switch: one-hot. Router: a point on the
/// simplex. Off: all zero, which reduces the adapted layer to its frozen base.
struct BranchControl {
    ControlMode mode = ControlMode::Switch;
    std::vector<double> alpha;

    static BranchControl switch_to(std::size_t index, std::size_t branches);

    static BranchControl router(std::vector<double> alpha) {
        BranchControl c{ControlMode::Router, std::move(alpha)};
        c.validate();
        return c;
    }

    static BranchControl off(std::size_t branches) { return {ControlMode::Off, std::vector<double>(branches, 0.0)}; }

    std::size_t branches() const { return alpha.size(); }

    void validate() const {
        if (alpha.empty()) throw ControlError("branch control with zero branches");
        switch (mode) {
            case ControlMode::Switch: {
                std::size_t ones = 0;
                for (double a : alpha) {
                    if (a == 1.0) {
                        ++ones;
                    } else if (a != 0.0) {
                        throw ControlError("switch control requires a one-hot alpha");
                    }
                }
                if (ones != 1) throw ControlError("switch control requires exactly one active branch");
                break;
            }
            case ControlMode::Router: {
                double s = 0.0;
                for (double a : alpha) {
                    if (!(a >= 0.0)) throw ControlError("router alpha must be non-negative");
                    s += a;
                }
                if (std::abs(s - 1.0) > 1e-9) throw ControlError("router alpha must sum to 1, got " + std::to_string(s));
                break;
            }
            case ControlMode::Off:
                for (double a : alpha)
                    if (a != 0.0) throw ControlError("off control requires all-zero alpha");
                break;
        }
    }
};

/// One-hot α selecting `index` out of `branches`.
inline std::vector<double> switch_alpha(std::size_t index, std::size_t branches) {
    if (index >= branches) {
        throw RoutingError("branch index " + std::to_string(index) + " out of range for " + std::to_string(branches) +
                           " branches");
    }
    std::vector<double> a(branches, 0.0);
    a[index] = 1.0;
    return a;
}

inline BranchControl BranchControl::switch_to(std::size_t index, std::size_t branches) {
    return {ControlMode::Switch, switch_alpha(index, branches)};
}

enum class RouterScope { Global, PerSite };

/// Soft selection gate α = softmax(W h + b) over a pooled hidden state.
struct RouterGate {
    Tensor weight;  // [N × d_model]
    Tensor bias;    // [N]
    RouterScope scope = RouterScope::Global;

    static RouterGate create(std::size_t branches, std::size_t d_model, Rng& rng,
                             RouterScope scope = RouterScope::Global) {
        RouterGate g;
        g.weight = rng.gaussian({branches, d_model}, 0.02);
        g.bias = Tensor::zeros({branches});
        g.scope = scope;
        return g;
    }

    std::size_t branches() const { return weight.dim(0); }
};

inline Tensor router_alpha(const RouterGate& gate, const Tensor& pooled_hidden) {
    const std::size_t d = gate.weight.dim(1);
    if (pooled_hidden.size() != d) {
        throw DimensionError("router_alpha: gate expects " + std::to_string(d) + " features, got " +
                             shape_str(pooled_hidden.shape()));
    }
    Tensor logits = add_rowwise(matmul_nt(reshape(pooled_hidden, {1, d}), gate.weight), gate.bias);
    return reshape(softmax(logits), {gate.branches()});
}

// ---------------------------------------------------------------------------
// Recommendation boundary

struct RecommendationQuery {
    std::string sample_id;
    std::string expert_text;
    std::vector<std::string> candidates;
};

/// Synchronous request/response boundary: a query in, one style label out.
class Recommender {
public:
    virtual ~Recommender() = default;
    virtual std::string recommend(const RecommendationQuery& query) = 0;
};

inline std::string text_hash(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::size_t candidate_index(const std::vector<std::string>& candidates, const std::string& label) {
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (candidates[i] == label) return i;
    throw RoutingError("recommended style '" + label + "' is not among the candidates");
}

/// Emits the true style with probability p, otherwise a uniformly chosen
/// wrong one. Each query consumes the same two draws regardless of p, so
/// agents sharing a seed see nested sets of correct answers as p varies.
class SimulatedAgent {
public:
    SimulatedAgent(double accuracy, std::uint64_t seed) : accuracy_(accuracy), rng_(seed) {
        if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
            throw ConfigurationError("recommendation accuracy must lie in [0, 1]");
        }
    }

    double accuracy() const { return accuracy_; }

    std::size_t recommend(std::size_t true_style, std::size_t branches) {
        if (true_style >= branches) throw RoutingError("true style outside the branch set");
        if (accuracy_ < 1.0 && branches < 2) {
            throw ConfigurationError("an imperfect agent needs at least two styles to be wrong about");
        }
        const double u = rng_.uniform();
        const std::size_t w = branches > 1 ? rng_.index(branches - 1) : 0;
        if (u < accuracy_) return true_style;
        return w < true_style ? w : w + 1;
    }

private:
    double accuracy_;
    Rng rng_;
};

/// Answers with the recorded true style of each sample.
class OracleRecommender final : public Recommender {
public:
    explicit OracleRecommender(std::map<std::string, std::string> truth) : truth_(std::move(truth)) {}

    std::string recommend(const RecommendationQuery& q) override {
        auto it = truth_.find(q.sample_id);
        if (it == truth_.end()) throw RoutingError("no recorded style for sample '" + q.sample_id + "'");
        candidate_index(q.candidates, it->second);
        return it->second;
    }

private:
    std::map<std::string, std::string> truth_;
};

class SimulatedRecommender final : public Recommender {
public:
    SimulatedRecommender(SimulatedAgent agent, std::map<std::string, std::string> truth)
        : agent_(std::move(agent)), truth_(std::move(truth)) {}

    std::string recommend(const RecommendationQuery& q) override {
        auto it = truth_.find(q.sample_id);
        if (it == truth_.end()) throw RoutingError("no recorded style for sample '" + q.sample_id + "'");
        const auto truth = candidate_index(q.candidates, it->second);
        return q.candidates[agent_.recommend(truth, q.candidates.size())];
    }

private:
    SimulatedAgent agent_;
    std::map<std::string, std::string> truth_;
};

/// Line protocol to an external agent process: each query is written as
/// "<expert-text-hash>\t<label>\t<label>...\n" and one label line is read back.
class ExecRecommender final : public Recommender {
public:
    explicit ExecRecommender(const std::string& command) {
        // A recommender that exits early must surface as an error, not a
        // SIGPIPE; this process-wide setting stays in effect afterwards.
        std::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0) throw RoutingError("cannot create recommender pipes");
        pid_ = fork();
        if (pid_ < 0) throw RoutingError("cannot fork recommender process");
        if (pid_ == 0) {
            dup2(to_child[0], STDIN_FILENO);
            dup2(from_child[1], STDOUT_FILENO);
            close(to_child[0]);
            close(to_child[1]);
            close(from_child[0]);
            close(from_child[1]);
            execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
            _exit(127);
        }
        close(to_child[0]);
        close(from_child[1]);
        out_ = fdopen(to_child[1], "w");
        in_ = fdopen(from_child[0], "r");
        if (!out_ || !in_) throw RoutingError("cannot open recommender streams");
    }

    ~ExecRecommender() override {
        if (out_) std::fclose(out_);
        if (in_) std::fclose(in_);
        if (pid_ > 0) {
            int status = 0;
            waitpid(pid_, &status, 0);
        }
    }

    ExecRecommender(const ExecRecommender&) = delete;
    ExecRecommender& operator=(const ExecRecommender&) = delete;

    static std::string format_query(const RecommendationQuery& q) {
        std::string line = text_hash(q.expert_text);
        for (const auto& c : q.candidates) line += "\t" + c;
        return line + "\n";
    }

    std::string recommend(const RecommendationQuery& q) override {
        const auto line = format_query(q);
        if (std::fputs(line.c_str(), out_) < 0 || std::fflush(out_) != 0) {
            throw RoutingError("recommender process closed its input");
        }
        std::string answer;
        int ch;
        while ((ch = std::fgetc(in_)) != EOF && ch != '\n') answer.push_back(static_cast<char>(ch));
        if (ch == EOF && answer.empty()) throw RoutingError("recommender process returned no answer");
        if (!answer.empty() && answer.back() == '\r') answer.pop_back();
        candidate_index(q.candidates, answer);
        return answer;
    }

private:
    pid_t pid_ = -1;
    std::FILE* out_ = nullptr;
    std::FILE* in_ = nullptr;
};

/// N×N counts; entry (t, p) counts samples of true style t predicted as p.
inline std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> predicted,
                                                              std::span<const std::size_t> truth, std::size_t n) {
    if (predicted.size() != truth.size()) {
        throw ContractError("confusion_matrix: " + std::to_string(predicted.size()) + " predictions for " +
                            std::to_string(truth.size()) + " labels");
    }
    std::vector<std::vector<std::size_t>> m(n, std::vector<std::size_t>(n, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= n || predicted[i] >= n) {
            throw InputError("confusion_matrix: label out of range at sample " + std::to_string(i));
        }
        ++m[truth[i]][predicted[i]];
    }
    return m;
}

}  // namespace magical
