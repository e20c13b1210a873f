#pragma once

// Synthetic process generation from a stochastic grammar: a labeled Markov
// chain over states, with per-activity duration noise. Because the chain is
// known, the best achievable next-activity accuracy has a closed form, which
// gives learning-dynamics tests an exact target instead of a guessed one.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ppm/event_log.hpp"

namespace ppm {

struct GrammarTransition {
    std::string activity;
    std::string next;
    double prob = 0.0;
};

struct ActivityDuration {
    double mean_seconds = 0.0;
    double jitter_seconds = 0.0;
};

struct ProcessGrammar {
    std::string start;
    std::string end;
    std::map<std::string, std::vector<GrammarTransition>> transitions;
    std::map<std::string, ActivityDuration> durations;
    int64_t horizon_seconds = 2592000;
};

// Line format, '#' starts a comment:
//   start <state>
//   end <state>
//   transition <src> <activity> <next> <prob>
//   duration <activity> <mean_seconds> <jitter_seconds>
//   horizon <seconds>
ProcessGrammar parse_grammar(const std::string& text);
ProcessGrammar load_grammar(const std::string& path);

void validate_grammar(const ProcessGrammar& g);

// Deterministic in (grammar, n_cases, seed); case i draws from its own
// stream, so the log is stable under n_cases changes up to truncation.
EventLog generate_log(const ProcessGrammar& g, int n_cases, uint64_t seed);

// Probability that always predicting the most likely outgoing transition of
// the current state is right, averaged over expected state visits.
double bayes_optimal_accuracy(const ProcessGrammar& g);

// Same idea for the teacher-forced target sequence (next activities plus a
// final end-of-case token). Requires activity labels that identify the next
// state uniquely, so a prefix of activities pins down the chain state.
double bayes_optimal_encoded_accuracy(const ProcessGrammar& g);

}  // namespace ppm
