#pragma once

// Operator commands. Each returns a process exit status:
// 0 success, 1 usage/config error, 2 backend failure, 3 data error.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rubricmem/errors.hpp"

namespace rubricmem::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitBackend = 2;
inline constexpr int kExitData = 3;

int exit_code(Errc code) noexcept;

struct TuneOptions {
    std::string config;
    bool resume = false;
    std::optional<int> from_round;
    std::optional<std::string> output;  // overrides the config's run directory
};

struct GenerateOptions {
    std::string bank;
    std::string queries;
    std::string config;
    std::string out;  // empty: stdout
};

struct ScoreOptions {
    std::string rubrics;
    std::string answers;
    std::string config;
    std::string queries;  // optional query texts for remote verifiers
    std::string out;
};

struct EvalPrefOptions {
    std::string bank;   // single bank, or
    std::string sweep;  // run directory whose checkpoints are swept
    std::string eval;   // queries JSONL; default: the world's evaluation split
    std::string references;
    std::string config;
    std::string csv;
    std::string out;
};

struct InspectOptions {
    std::string bank;
    std::optional<std::string> category;
    std::optional<std::size_t> top;
};

// These throw rubricmem::Error; run() maps errors to exit codes.
int cmd_tune(const TuneOptions& opt, std::ostream& out);
int cmd_generate(const GenerateOptions& opt, std::ostream& out);
int cmd_score(const ScoreOptions& opt, std::ostream& out);
int cmd_eval_pref(const EvalPrefOptions& opt, std::ostream& out);
int cmd_inspect_memory(const InspectOptions& opt, std::ostream& out);

/// Parses argv and dispatches; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rubricmem::cli
