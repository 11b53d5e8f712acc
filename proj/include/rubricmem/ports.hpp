#pragma once

// Contracts for the five frozen model roles. Raw implementations (synthetic or
// remote) implement these interfaces; guard() wraps them with precondition
// checks, retries, response validation and audit logging, and the engine only
// ever talks to guarded ports.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/domain.hpp"

namespace rubricmem::ports {

inline constexpr double kOutOfRangeSlack = 0.05;
inline constexpr const char* kFallbackCategory = "uncategorized";

struct Decoding {
    double temperature = 1.0;
    double nucleus_p = 1.0;
    std::uint64_t seed = 0;
};

struct ProposerRequest {
    Query query;
    CandidatePool candidates;
    std::optional<ReferenceAnswer> reference;
    std::optional<RetrievedMemory> memory;
    ProposalMode mode = ProposalMode::memory_driven;
    /// Outer round the proposal is made in; lets backends schedule exploration.
    int round = 0;
    Decoding decoding;
};

struct VerifierRequest {
    Query query;
    std::string answer;
    std::string criterion;
    VerifierMode mode = VerifierMode::scalar;
    /// Repetition index; repeated evaluations of the same triple differ only here.
    std::uint32_t sample = 0;
};

struct CategorizerRequest {
    std::vector<std::string> existing_categories;
    std::string criterion;
};

struct AdversaryRequest {
    Query query;
    Rubric rubric;
    int num_candidates = 1;
    /// Round stamp for the generated candidates (s + 1).
    int round = 1;
    Decoding decoding;
};

struct AnswerRequest {
    Query query;
    int num_candidates = 1;
    Decoding decoding;
};

/// Throws Errc::precondition unless contrastive requests carry a reference and
/// no memory, and memory-driven requests carry memory and no reference.
void check_mode(const ProposerRequest& req);

class RubricProposer {
  public:
    virtual ~RubricProposer() = default;
    virtual Rubric propose(const ProposerRequest& req) = 0;
};

class Verifier {
  public:
    virtual ~Verifier() = default;
    virtual double verify(const VerifierRequest& req) = 0;
};

class Categorizer {
  public:
    virtual ~Categorizer() = default;
    virtual std::string categorize(const CategorizerRequest& req) = 0;
};

class Adversary {
  public:
    virtual ~Adversary() = default;
    virtual CandidatePool generate_adversarial(const AdversaryRequest& req) = 0;
};

class AnswerModel {
  public:
    virtual ~AnswerModel() = default;
    virtual CandidatePool generate_answers(const AnswerRequest& req) = 0;
};

struct ModelPorts {
    std::shared_ptr<RubricProposer> proposer;
    std::shared_ptr<Verifier> verifier;
    std::shared_ptr<Categorizer> categorizer;
    std::shared_ptr<Adversary> adversary;
    std::shared_ptr<AnswerModel> answers;
};

// Retry ------------------------------------------------------------------------

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{200};
    double multiplier = 2.0;
    std::chrono::milliseconds max_backoff{5000};
    /// Fraction of the delay randomized in [-jitter, +jitter].
    double jitter = 0.2;

    /// Delay before retry number `retry` (1-based), jitter drawn from `seed`.
    [[nodiscard]] std::chrono::milliseconds delay(int retry, std::uint64_t seed) const;
};

// Audit log --------------------------------------------------------------------

struct AuditRecord {
    std::string role;
    std::string request_digest;
    int attempt = 0;  // 0 for the first try, n for the n-th retry
    bool ok = false;
    nlohmann::json response;  // result on success, error text on failure
    double latency_ms = 0.0;
};

/// Append-only JSONL log of every model call attempt. Thread-safe. With an
/// empty path records are only counted.
class AuditLog {
  public:
    AuditLog();
    explicit AuditLog(std::string path);

    void append(const AuditRecord& record);

    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::size_t failures() const;
    [[nodiscard]] const std::string& path() const noexcept { return path_; }

  private:
    struct State;
    std::string path_;
    std::shared_ptr<State> state_;
};

// Guarding ---------------------------------------------------------------------

struct GuardOptions {
    RetryPolicy retry;
    std::size_t max_rubric_items = kDefaultMaxRubricItems;
};

/// Wraps raw ports. Every attempted call is audited before its result is used.
ModelPorts guard(const ModelPorts& raw, std::shared_ptr<AuditLog> audit, GuardOptions options = {});

/// Per-role retry policies for mixed backends.
struct RoleGuardOptions {
    GuardOptions proposer, verifier, categorizer, adversary, answers;
};
ModelPorts guard(const ModelPorts& raw, std::shared_ptr<AuditLog> audit, const RoleGuardOptions& options);

/// Applies the out-of-range rule to a raw verifier response: values within the
/// slack are clamped (with a warning), anything else throws
/// Errc::out_of_range_response. Binary mode rounds to {0, 1}.
double sanitize_score(double raw, VerifierMode mode);

}  // namespace rubricmem::ports
