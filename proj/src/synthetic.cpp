#include "ppm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

namespace ppm {

ProcessGrammar parse_grammar(const std::string& text) {
    ProcessGrammar g;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string directive;
        if (!(ls >> directive)) continue;
        const auto fail = [&](const std::string& why) {
            throw DataError("grammar line " + std::to_string(line_no) + ": " + why);
        };
        if (directive == "start") {
            if (!(ls >> g.start)) fail("expected: start <state>");
        } else if (directive == "end") {
            if (!(ls >> g.end)) fail("expected: end <state>");
        } else if (directive == "transition") {
            GrammarTransition t;
            std::string src;
            if (!(ls >> src >> t.activity >> t.next >> t.prob))
                fail("expected: transition <src> <activity> <next> <prob>");
            g.transitions[src].push_back(std::move(t));
        } else if (directive == "duration") {
            std::string act;
            ActivityDuration d;
            if (!(ls >> act >> d.mean_seconds >> d.jitter_seconds))
                fail("expected: duration <activity> <mean_seconds> <jitter_seconds>");
            g.durations[act] = d;
        } else if (directive == "horizon") {
            if (!(ls >> g.horizon_seconds)) fail("expected: horizon <seconds>");
        } else {
            fail("unknown directive '" + directive + "'");
        }
        std::string extra;
        if (ls >> extra) fail("trailing token '" + extra + "'");
    }
    validate_grammar(g);
    return g;
}

ProcessGrammar load_grammar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_grammar(buf.str());
}

void validate_grammar(const ProcessGrammar& g) {
    if (g.start.empty()) throw DataError("grammar has no start state");
    if (g.end.empty()) throw DataError("grammar has no end state");
    if (g.start == g.end) throw DataError("start state equals end state");
    if (g.transitions.empty()) throw DataError("grammar has no transitions");
    if (g.transitions.count(g.end)) throw DataError("end state must be absorbing");
    if (!g.transitions.count(g.start)) throw DataError("start state has no transitions");
    if (g.horizon_seconds < 1) throw DataError("horizon must be >= 1 second");

    for (const auto& [src, edges] : g.transitions) {
        double total = 0.0;
        for (const auto& t : edges) {
            if (t.prob <= 0.0)
                throw DataError("transition " + src + " -> " + t.next + " has prob " +
                                std::to_string(t.prob) + ", must be > 0");
            if (t.next != g.end && !g.transitions.count(t.next))
                throw DataError("state " + t.next + " is reachable but has no transitions");
            const auto it = g.durations.find(t.activity);
            if (it == g.durations.end())
                throw DataError("activity " + t.activity + " has no duration");
            if (it->second.mean_seconds <= 0.0)
                throw DataError("activity " + t.activity + " has non-positive mean duration");
            if (it->second.jitter_seconds < 0.0)
                throw DataError("activity " + t.activity + " has negative duration jitter");
            total += t.prob;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw DataError("transitions out of " + src + " sum to " + std::to_string(total) +
                            ", must sum to 1");
    }

    // every state must be able to reach the end (walk the reverse graph)
    std::set<std::string> can_finish{g.end};
    bool grew = true;
    while (grew) {
        grew = false;
        for (const auto& [src, edges] : g.transitions) {
            if (can_finish.count(src)) continue;
            for (const auto& t : edges)
                if (can_finish.count(t.next)) {
                    can_finish.insert(src);
                    grew = true;
                    break;
                }
        }
    }
    for (const auto& [src, edges] : g.transitions)
        if (!can_finish.count(src))
            throw DataError("state " + src + " cannot reach the end state");
}

EventLog generate_log(const ProcessGrammar& g, int n_cases, uint64_t seed) {
    validate_grammar(g);
    if (n_cases < 1) throw ConfigError("n_cases must be >= 1");
    constexpr int64_t kBaseTime = 1704067200;  // 2024-01-01T00:00:00Z
    constexpr int kMaxSteps = 100000;

    EventLog log;
    log.cases.reserve(static_cast<size_t>(n_cases));
    for (int i = 0; i < n_cases; ++i) {
        std::mt19937 rng(static_cast<uint32_t>(derive_seed(seed, static_cast<uint64_t>(i))));
        char id[32];
        std::snprintf(id, sizeof(id), "case_%06d", i);
        Case c;
        c.id = id;
        int64_t t = kBaseTime + static_cast<int64_t>(uniform01(rng) * static_cast<double>(g.horizon_seconds));
        std::string state = g.start;
        for (int step = 0; state != g.end; ++step) {
            if (step >= kMaxSteps)
                throw DataError("case " + c.id + " exceeded " + std::to_string(kMaxSteps) + " steps");
            const auto& edges = g.transitions.at(state);
            const double u = uniform01(rng);
            double cum = 0.0;
            const GrammarTransition* chosen = &edges.back();
            for (const auto& e : edges) {
                cum += e.prob;
                if (u < cum) {
                    chosen = &e;
                    break;
                }
            }
            c.events.push_back({chosen->activity, static_cast<double>(t)});
            const auto& d = g.durations.at(chosen->activity);
            const int64_t dur = std::llround(d.mean_seconds + (2.0 * uniform01(rng) - 1.0) * d.jitter_seconds);
            t += std::max<int64_t>(1, dur);
            state = chosen->next;
        }
        log.cases.push_back(std::move(c));
    }
    recompute_activity_set(log);
    return log;
}

namespace {

// Expected visit counts per transient state: (I - P^T) v = e_start.
std::map<std::string, double> expected_visits(const ProcessGrammar& g) {
    std::vector<std::string> states;
    for (const auto& [src, edges] : g.transitions) states.push_back(src);
    const int n = static_cast<int>(states.size());
    std::map<std::string, int> index;
    for (int i = 0; i < n; ++i) index[states[i]] = i;

    std::vector<double> a(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> v(n, 0.0);
    for (int i = 0; i < n; ++i) a[static_cast<size_t>(i) * n + i] = 1.0;
    for (const auto& [src, edges] : g.transitions) {
        const int j = index.at(src);
        for (const auto& t : edges) {
            if (t.next == g.end) continue;
            a[static_cast<size_t>(index.at(t.next)) * n + j] -= t.prob;
        }
    }
    v[index.at(g.start)] = 1.0;

    // Gaussian elimination with partial pivoting
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int row = col + 1; row < n; ++row)
            if (std::abs(a[static_cast<size_t>(row) * n + col]) >
                std::abs(a[static_cast<size_t>(pivot) * n + col]))
                pivot = row;
        if (std::abs(a[static_cast<size_t>(pivot) * n + col]) < 1e-12)
            throw DataError("grammar visit system is singular");
        if (pivot != col) {
            for (int k = 0; k < n; ++k)
                std::swap(a[static_cast<size_t>(pivot) * n + k], a[static_cast<size_t>(col) * n + k]);
            std::swap(v[pivot], v[col]);
        }
        for (int row = col + 1; row < n; ++row) {
            const double f = a[static_cast<size_t>(row) * n + col] / a[static_cast<size_t>(col) * n + col];
            if (f == 0.0) continue;
            for (int k = col; k < n; ++k)
                a[static_cast<size_t>(row) * n + k] -= f * a[static_cast<size_t>(col) * n + k];
            v[row] -= f * v[col];
        }
    }
    for (int col = n - 1; col >= 0; --col) {
        for (int k = col + 1; k < n; ++k) v[col] -= a[static_cast<size_t>(col) * n + k] * v[k];
        v[col] /= a[static_cast<size_t>(col) * n + col];
    }

    std::map<std::string, double> visits;
    for (int i = 0; i < n; ++i) visits[states[i]] = v[i];
    return visits;
}

double max_prob(const std::vector<GrammarTransition>& edges) {
    double best = 0.0;
    for (const auto& t : edges) best = std::max(best, t.prob);
    return best;
}

}  // namespace

double bayes_optimal_accuracy(const ProcessGrammar& g) {
    validate_grammar(g);
    const auto visits = expected_visits(g);
    double hits = 0.0, total = 0.0;
    for (const auto& [src, edges] : g.transitions) {
        const double v = visits.at(src);
        hits += v * max_prob(edges);
        total += v;
    }
    return hits / total;
}

double bayes_optimal_encoded_accuracy(const ProcessGrammar& g) {
    validate_grammar(g);
    std::map<std::string, std::set<std::string>> activity_next;
    for (const auto& [src, edges] : g.transitions)
        for (const auto& t : edges) activity_next[t.activity].insert(t.next);
    for (const auto& [act, nexts] : activity_next)
        if (nexts.size() > 1)
            throw ValueError("activity " + act + " leads to multiple states; prefixes cannot pin down "
                             "the chain state");

    const auto visits = expected_visits(g);
    double hits = 0.0, total = 0.0;
    for (const auto& [src, edges] : g.transitions) {
        const double v = visits.at(src);
        hits += v * max_prob(edges);
        total += v;
    }
    // Targets shift one step: the start state's first outgoing transition is
    // never a target, and a perfectly predictable end-of-case token is.
    return (hits - max_prob(g.transitions.at(g.start)) + 1.0) / total;
}

}  // namespace ppm
