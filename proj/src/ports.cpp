#include "rubricmem/ports.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "rubricmem/digest.hpp"
#include "rubricmem/errors.hpp"

namespace rubricmem::ports {

void check_mode(const ProposerRequest& req) {
    if (req.mode == ProposalMode::contrastive) {
        if (!req.reference || req.memory) {
            throw Error(Errc::precondition, "contrastive proposal needs a reference and no memory");
        }
    } else if (req.reference || !req.memory) {
        throw Error(Errc::precondition, "memory-driven proposal needs memory and no reference");
    }
    if (req.candidates.candidates.empty()) throw Error(Errc::precondition, "proposal needs candidates");
}

std::chrono::milliseconds RetryPolicy::delay(int retry, std::uint64_t seed) const {
    if (retry <= 0 || initial_backoff.count() <= 0) return std::chrono::milliseconds{0};
    double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, retry - 1);
    ms = std::min(ms, static_cast<double>(max_backoff.count()));
    SplitMix64 rng(seed + static_cast<std::uint64_t>(retry));
    ms *= 1.0 + jitter * (2.0 * rng.uniform() - 1.0);
    return std::chrono::milliseconds{static_cast<long long>(std::max(0.0, ms))};
}

// AuditLog ---------------------------------------------------------------------

struct AuditLog::State {
    std::mutex mutex;
    std::ofstream out;
    std::size_t count = 0;
    std::size_t failures = 0;
};

AuditLog::AuditLog() : state_(std::make_shared<State>()) {}

AuditLog::AuditLog(std::string path) : path_(std::move(path)), state_(std::make_shared<State>()) {
    if (!path_.empty()) {
        state_->out.open(path_, std::ios::app);
        if (!state_->out) throw Error(Errc::io, "cannot open audit log " + path_);
    }
}

void AuditLog::append(const AuditRecord& record) {
    std::lock_guard lock(state_->mutex);
    ++state_->count;
    if (!record.ok) ++state_->failures;
    if (!state_->out.is_open()) return;
    nlohmann::json line = {{"role", record.role},
                           {"request_digest", record.request_digest},
                           {"retry", record.attempt},
                           {"ok", record.ok},
                           {"response", record.response},
                           {"latency_ms", record.latency_ms}};
    state_->out << line.dump() << '\n';
    state_->out.flush();
}

std::size_t AuditLog::size() const {
    std::lock_guard lock(state_->mutex);
    return state_->count;
}

std::size_t AuditLog::failures() const {
    std::lock_guard lock(state_->mutex);
    return state_->failures;
}

// Score sanitizing -------------------------------------------------------------

double sanitize_score(double raw, VerifierMode mode) {
    if (!std::isfinite(raw)) throw Error(Errc::out_of_range_response, "verifier returned a non-finite score");
    double score = raw;
    if (score < 0.0 || score > 1.0) {
        if (score < -kOutOfRangeSlack || score > 1.0 + kOutOfRangeSlack) {
            throw Error(Errc::out_of_range_response, "verifier score " + std::to_string(raw) + " outside [0,1]");
        }
        score = std::clamp(score, 0.0, 1.0);
        spdlog::warn("verifier score {} clamped to {}", raw, score);
    }
    if (mode == VerifierMode::binary && score != 0.0 && score != 1.0) {
        const double rounded = score >= 0.5 ? 1.0 : 0.0;
        spdlog::warn("binary verifier returned {}; rounded to {}", score, rounded);
        score = rounded;
    }
    return score;
}

namespace {

using Clock = std::chrono::steady_clock;

// Runs `call` under the retry policy, auditing every attempt. `call` returns
// the value plus its JSON rendering for the audit record.
template <typename Fn>
auto with_retry(const char* role, const std::string& request_digest, const RetryPolicy& policy,
                AuditLog& audit, Fn&& call) -> decltype(call().first) {
    for (int attempt = 0;; ++attempt) {
        const auto start = Clock::now();
        auto elapsed = [&] {
            return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        };
        try {
            auto [value, rendered] = call();
            audit.append({role, request_digest, attempt, true, std::move(rendered), elapsed()});
            return std::move(value);
        } catch (const Error& e) {
            audit.append({role, request_digest, attempt, false, e.what(), elapsed()});
            if (!is_retryable(e.code()) || attempt >= policy.max_retries) throw;
            spdlog::debug("{} call {} failed ({}); retry {}", role, request_digest, e.what(), attempt + 1);
        } catch (const std::exception& e) {
            // Anything unexpected from a backend is treated as an outage.
            audit.append({role, request_digest, attempt, false, e.what(), elapsed()});
            if (attempt >= policy.max_retries) throw Error(Errc::backend_unavailable, e.what());
        }
        const auto wait = policy.delay(attempt + 1, fnv1a64(request_digest));
        if (wait.count() > 0) std::this_thread::sleep_for(wait);
    }
}

std::string proposer_digest(const ProposerRequest& r) {
    std::string cands;
    for (const auto& c : r.candidates.candidates) cands += c.text + '\x1e';
    return digest_parts({"propose", r.query.id, to_string(r.mode), std::to_string(r.round),
                         std::to_string(r.memory ? r.memory->bank_version : 0), cands,
                         std::to_string(r.decoding.seed)});
}

class GuardedProposer final : public RubricProposer {
  public:
    GuardedProposer(std::shared_ptr<RubricProposer> inner, std::shared_ptr<AuditLog> audit, GuardOptions opt)
        : inner_(std::move(inner)), audit_(std::move(audit)), opt_(opt) {}

    Rubric propose(const ProposerRequest& req) override {
        check_mode(req);
        const auto d = proposer_digest(req);
        return with_retry("proposer", d, opt_.retry, *audit_, [&] {
            Rubric raw = inner_->propose(req);
            if (raw.items.empty()) throw Error(Errc::malformed_response, "proposer returned no rubric items");
            Provenance prov{req.mode, req.memory ? req.memory->bank_version : 0};
            Rubric rubric;
            try {
                rubric = make_rubric(req.query.id, raw.items, opt_.max_rubric_items, prov);
            } catch (const Error& e) {
                throw Error(Errc::malformed_response, e.what());
            }
            nlohmann::json rendered = rubric;
            return std::pair{std::move(rubric), std::move(rendered)};
        });
    }

  private:
    std::shared_ptr<RubricProposer> inner_;
    std::shared_ptr<AuditLog> audit_;
    GuardOptions opt_;
};

class GuardedVerifier final : public Verifier {
  public:
    GuardedVerifier(std::shared_ptr<Verifier> inner, std::shared_ptr<AuditLog> audit, GuardOptions opt)
        : inner_(std::move(inner)), audit_(std::move(audit)), opt_(opt) {}

    double verify(const VerifierRequest& req) override {
        if (req.answer.empty() || req.criterion.empty()) {
            throw Error(Errc::precondition, "verification needs a non-empty answer and criterion");
        }
        const auto d = digest_parts({"verify", req.query.id, req.answer, req.criterion, to_string(req.mode),
                                     std::to_string(req.sample)});
        return with_retry("verifier", d, opt_.retry, *audit_, [&] {
            const double raw = inner_->verify(req);
            const double score = sanitize_score(raw, req.mode);
            return std::pair{score, nlohmann::json(raw)};
        });
    }

  private:
    std::shared_ptr<Verifier> inner_;
    std::shared_ptr<AuditLog> audit_;
    GuardOptions opt_;
};

bool valid_category_name(const std::string& name) {
    if (name.empty() || name.size() > 80) return false;
    return std::none_of(name.begin(), name.end(), [](char c) { return c == '\n' || c == '\r'; });
}

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

class GuardedCategorizer final : public Categorizer {
  public:
    GuardedCategorizer(std::shared_ptr<Categorizer> inner, std::shared_ptr<AuditLog> audit, GuardOptions opt)
        : inner_(std::move(inner)), audit_(std::move(audit)), opt_(opt) {}

    std::string categorize(const CategorizerRequest& req) override {
        if (trim(req.criterion).empty()) throw Error(Errc::precondition, "criterion is empty");
        std::string joined;
        for (const auto& c : req.existing_categories) joined += c + '\x1e';
        const auto d = digest_parts({"categorize", joined, req.criterion});
        try {
            return with_retry("categorizer", d, opt_.retry, *audit_, [&] {
                std::string name = trim(inner_->categorize(req));
                if (!valid_category_name(name)) {
                    throw Error(Errc::malformed_response, "unusable category name");
                }
                // Prefer the verbatim spelling of an existing category.
                const auto key = canonicalize(name);
                for (const auto& existing : req.existing_categories) {
                    try {
                        if (canonicalize(existing) == key) {
                            name = existing;
                            break;
                        }
                    } catch (const Error&) {
                    }
                }
                return std::pair{name, nlohmann::json(name)};
            });
        } catch (const Error& e) {
            if (e.code() != Errc::malformed_response) throw;
            spdlog::warn("categorizer reply unusable for '{}'; using '{}'", req.criterion, kFallbackCategory);
            return kFallbackCategory;
        }
    }

  private:
    std::shared_ptr<Categorizer> inner_;
    std::shared_ptr<AuditLog> audit_;
    GuardOptions opt_;
};

void check_pool(const CandidatePool& pool, const std::string& query_id, int count, Origin origin, int round) {
    if (pool.candidates.size() != static_cast<std::size_t>(count)) {
        throw Error(Errc::malformed_response, "expected " + std::to_string(count) + " candidates, got " +
                                                  std::to_string(pool.candidates.size()));
    }
    for (const auto& c : pool.candidates) {
        if (c.query_id != query_id || c.origin != origin || c.round != round || c.text.empty()) {
            throw Error(Errc::malformed_response, "candidate stamp mismatch for query " + query_id);
        }
    }
}

class GuardedAdversary final : public Adversary {
  public:
    GuardedAdversary(std::shared_ptr<Adversary> inner, std::shared_ptr<AuditLog> audit, GuardOptions opt)
        : inner_(std::move(inner)), audit_(std::move(audit)), opt_(opt) {}

    CandidatePool generate_adversarial(const AdversaryRequest& req) override {
        if (req.rubric.items.empty()) throw Error(Errc::precondition, "adversary needs a non-empty rubric");
        if (req.num_candidates < 1) throw Error(Errc::precondition, "num_candidates must be >= 1");
        if (req.round < 1) throw Error(Errc::precondition, "adversarial round must be >= 1");
        std::string items;
        for (const auto& it : req.rubric.items) items += it.criterion + '\x1e' + std::to_string(it.weight);
        const auto d = digest_parts({"adversary", req.query.id, items, std::to_string(req.num_candidates),
                                     std::to_string(req.round), std::to_string(req.decoding.seed)});
        return with_retry("adversary", d, opt_.retry, *audit_, [&] {
            CandidatePool pool = inner_->generate_adversarial(req);
            pool.query_id = req.query.id;
            pool.round = req.round;
            check_pool(pool, req.query.id, req.num_candidates, Origin::adversarial, req.round);
            nlohmann::json rendered = pool;
            return std::pair{std::move(pool), std::move(rendered)};
        });
    }

  private:
    std::shared_ptr<Adversary> inner_;
    std::shared_ptr<AuditLog> audit_;
    GuardOptions opt_;
};

class GuardedAnswerModel final : public AnswerModel {
  public:
    GuardedAnswerModel(std::shared_ptr<AnswerModel> inner, std::shared_ptr<AuditLog> audit, GuardOptions opt)
        : inner_(std::move(inner)), audit_(std::move(audit)), opt_(opt) {}

    CandidatePool generate_answers(const AnswerRequest& req) override {
        if (req.num_candidates < 1) throw Error(Errc::precondition, "num_candidates must be >= 1");
        const auto d = digest_parts({"answers", req.query.id, std::to_string(req.num_candidates),
                                     std::to_string(req.decoding.seed)});
        return with_retry("answers", d, opt_.retry, *audit_, [&] {
            CandidatePool pool = inner_->generate_answers(req);
            pool.query_id = req.query.id;
            pool.round = 0;
            check_pool(pool, req.query.id, req.num_candidates, Origin::base, 0);
            nlohmann::json rendered = pool;
            return std::pair{std::move(pool), std::move(rendered)};
        });
    }

  private:
    std::shared_ptr<AnswerModel> inner_;
    std::shared_ptr<AuditLog> audit_;
    GuardOptions opt_;
};

}  // namespace

ModelPorts guard(const ModelPorts& raw, std::shared_ptr<AuditLog> audit, GuardOptions options) {
    return guard(raw, std::move(audit), RoleGuardOptions{options, options, options, options, options});
}

ModelPorts guard(const ModelPorts& raw, std::shared_ptr<AuditLog> audit, const RoleGuardOptions& options) {
    if (!audit) audit = std::make_shared<AuditLog>();
    ModelPorts out;
    if (raw.proposer) out.proposer = std::make_shared<GuardedProposer>(raw.proposer, audit, options.proposer);
    if (raw.verifier) out.verifier = std::make_shared<GuardedVerifier>(raw.verifier, audit, options.verifier);
    if (raw.categorizer) {
        out.categorizer = std::make_shared<GuardedCategorizer>(raw.categorizer, audit, options.categorizer);
    }
    if (raw.adversary) out.adversary = std::make_shared<GuardedAdversary>(raw.adversary, audit, options.adversary);
    if (raw.answers) out.answers = std::make_shared<GuardedAnswerModel>(raw.answers, audit, options.answers);
    return out;
}

}  // namespace rubricmem::ports
