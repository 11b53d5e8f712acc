#include <doctest.h>

#include <atomic>
#include <fstream>

#include "rubricmem/errors.hpp"
#include "rubricmem/ports.hpp"
#include "support.hpp"

using namespace rubricmem;
using namespace rubricmem::ports;

namespace {

struct Script : Verifier, Categorizer, RubricProposer, Adversary, AnswerModel {
    std::vector<Errc> failures;  // thrown in order before succeeding
    double score = 0.5;
    std::string category = "formatting";
    std::atomic<int> calls{0};

    void maybe_fail() {
        const auto n = static_cast<std::size_t>(calls++);
        if (n < failures.size()) throw Error(failures[n], "scripted failure");
    }
    double verify(const VerifierRequest&) override {
        maybe_fail();
        return score;
    }
    std::string categorize(const CategorizerRequest&) override {
        maybe_fail();
        return category;
    }
    Rubric propose(const ProposerRequest& req) override {
        maybe_fail();
        return {req.query.id, {{"has:a", 2.0}, {"has:b", 2.0}}, std::nullopt};
    }
    CandidatePool generate_adversarial(const AdversaryRequest& req) override {
        maybe_fail();
        CandidatePool p{req.query.id, req.round, {}};
        for (int j = 0; j < req.num_candidates; ++j) p.candidates.push_back({req.query.id, "x", Origin::adversarial, req.round});
        return p;
    }
    CandidatePool generate_answers(const AnswerRequest& req) override {
        maybe_fail();
        CandidatePool p{req.query.id, 0, {}};
        for (int j = 0; j < req.num_candidates; ++j) p.candidates.push_back({req.query.id, "x", Origin::base, 0});
        return p;
    }
};

GuardOptions fast(int retries) {
    GuardOptions o;
    o.retry.max_retries = retries;
    o.retry.initial_backoff = std::chrono::milliseconds(0);
    return o;
}

ModelPorts all_of(const std::shared_ptr<Script>& s) { return {s, s, s, s, s}; }

const Query kQuery{"q1", "question", Split::tuning};

}  // namespace

TEST_SUITE("ports") {

TEST_CASE("sanitize_score clamps within slack and rejects beyond it") {
    CHECK(sanitize_score(1.03, VerifierMode::scalar) == 1.0);
    CHECK(sanitize_score(-0.04, VerifierMode::scalar) == 0.0);
    CHECK(sanitize_score(0.42, VerifierMode::scalar) == 0.42);
    CHECK_THROWS_AS(sanitize_score(1.2, VerifierMode::scalar), Error);
    CHECK_THROWS_AS(sanitize_score(NAN, VerifierMode::scalar), Error);
    CHECK(sanitize_score(0.8, VerifierMode::binary) == 1.0);
    CHECK(sanitize_score(0.2, VerifierMode::binary) == 0.0);
}

TEST_CASE("retries retryable failures and audits every attempt") {
    auto s = std::make_shared<Script>();
    s->failures = {Errc::backend_unavailable, Errc::malformed_response};
    auto audit = std::make_shared<AuditLog>();
    auto g = guard(all_of(s), audit, fast(3));
    CHECK(g.verifier->verify({kQuery, "ans", "crit", VerifierMode::scalar, 0}) == 0.5);
    CHECK(s->calls == 3);
    CHECK(audit->size() == 3);
    CHECK(audit->failures() == 2);
}

TEST_CASE("gives up after max_retries") {
    auto s = std::make_shared<Script>();
    s->failures = {Errc::backend_unavailable, Errc::backend_unavailable, Errc::backend_unavailable};
    auto audit = std::make_shared<AuditLog>();
    auto g = guard(all_of(s), audit, fast(1));
    try {
        g.verifier->verify({kQuery, "ans", "crit", VerifierMode::scalar, 0});
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::backend_unavailable);
    }
    CHECK(s->calls == 2);
    CHECK(audit->size() == 2);
}

TEST_CASE("out-of-range verifier responses are retried then surfaced") {
    auto s = std::make_shared<Script>();
    s->score = 1.5;
    auto audit = std::make_shared<AuditLog>();
    auto g = guard(all_of(s), audit, fast(2));
    CHECK_THROWS_AS(g.verifier->verify({kQuery, "ans", "crit", VerifierMode::scalar, 0}), Error);
    CHECK(audit->size() == 3);
}

TEST_CASE("mode violations fail before any call") {
    auto s = std::make_shared<Script>();
    auto audit = std::make_shared<AuditLog>();
    auto g = guard(all_of(s), audit, fast(0));
    ProposerRequest req;
    req.query = kQuery;
    req.candidates = {"q1", 0, {{"q1", "x", Origin::base, 0}}};
    req.mode = ProposalMode::contrastive;  // but no reference
    try {
        g.proposer->propose(req);
        FAIL("expected precondition error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::precondition);
    }
    req.mode = ProposalMode::memory_driven;
    req.reference = ReferenceAnswer{"q1", "ref"};
    req.memory = RetrievedMemory{};
    CHECK_THROWS_AS(g.proposer->propose(req), Error);
    CHECK(s->calls == 0);
    CHECK(audit->size() == 0);

    req.reference.reset();
    const auto r = g.proposer->propose(req);
    CHECK(r.items.size() == 2);
    CHECK(r.items[0].weight == doctest::Approx(0.5));
    REQUIRE(r.provenance.has_value());
    CHECK(r.provenance->mode == ProposalMode::memory_driven);
}

TEST_CASE("categorizer keeps existing spelling and falls back on malformed replies") {
    auto s = std::make_shared<Script>();
    s->category = "  Formatting ";
    auto g = guard(all_of(s), std::make_shared<AuditLog>(), fast(0));
    CHECK(g.categorizer->categorize({{"formatting"}, "avoids markdown"}) == "formatting");

    auto bad = std::make_shared<Script>();
    bad->category = "";
    auto gb = guard(all_of(bad), std::make_shared<AuditLog>(), fast(1));
    CHECK(gb.categorizer->categorize({{"formatting"}, "avoids markdown"}) == kFallbackCategory);

    auto down = std::make_shared<Script>();
    down->failures = {Errc::backend_unavailable, Errc::backend_unavailable};
    auto gd = guard(all_of(down), std::make_shared<AuditLog>(), fast(1));
    CHECK_THROWS_AS(gd.categorizer->categorize({{}, "x"}), Error);
}

TEST_CASE("pool generation preconditions") {
    auto s = std::make_shared<Script>();
    auto g = guard(all_of(s), std::make_shared<AuditLog>(), fast(0));
    CHECK_THROWS_AS(g.answers->generate_answers({kQuery, 0, {}}), Error);
    CHECK(g.answers->generate_answers({kQuery, 1, {}}).candidates.size() == 1);
    CHECK_THROWS_AS(g.adversary->generate_adversarial({kQuery, Rubric{"q1", {}, std::nullopt}, 2, 1, {}}), Error);
    CHECK(s->calls == 1);
}

TEST_CASE("audit log writes one JSON line per attempt") {
    const auto dir = support::fresh_dir("audit");
    const auto path = (dir / "audit.jsonl").string();
    {
        auto s = std::make_shared<Script>();
        s->failures = {Errc::malformed_response};
        auto audit = std::make_shared<AuditLog>(path);
        auto g = guard(all_of(s), audit, fast(2));
        g.verifier->verify({kQuery, "ans", "crit", VerifierMode::scalar, 0});
        g.verifier->verify({kQuery, "ans", "crit2", VerifierMode::scalar, 0});
    }
    std::ifstream in(path);
    std::string line;
    std::vector<nlohmann::json> lines;
    while (std::getline(in, line)) lines.push_back(nlohmann::json::parse(line));
    REQUIRE(lines.size() == 3);
    CHECK(lines[0]["ok"] == false);
    CHECK(lines[1]["ok"] == true);
    CHECK(lines[0]["request_digest"] == lines[1]["request_digest"]);
    CHECK(lines[2]["request_digest"] != lines[1]["request_digest"]);
}

TEST_CASE("retry delays grow, cap and stay within jitter") {
    RetryPolicy p;
    p.initial_backoff = std::chrono::milliseconds(100);
    p.multiplier = 2.0;
    p.max_backoff = std::chrono::milliseconds(300);
    p.jitter = 0.0;
    CHECK(p.delay(1, 1).count() == 100);
    CHECK(p.delay(2, 1).count() == 200);
    CHECK(p.delay(3, 1).count() == 300);
    p.jitter = 0.2;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto d = p.delay(1, seed).count();
        CHECK(d >= 80);
        CHECK(d <= 120);
        CHECK(d == p.delay(1, seed).count());
    }
}

}  // TEST_SUITE
