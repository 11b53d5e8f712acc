#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <doctest.h>

#include <cstdlib>
#include <thread>

#include "rubricmem/errors.hpp"
#include "rubricmem/remote.hpp"
#include "support.hpp"

using namespace rubricmem;
using namespace rubricmem::remote;

namespace {

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an Error");
    return Errc::io;
}

/// Replies with queued contents and records every prompt.
class ScriptedTransport : public ChatTransport {
  public:
    std::vector<std::string> replies;
    std::vector<std::string> prompts;

    std::string complete(const std::vector<ChatMessage>& messages, const ports::Decoding&) override {
        prompts.push_back(messages.back().content);
        if (replies.empty()) throw Error(Errc::backend_unavailable, "script exhausted");
        auto r = replies.front();
        replies.erase(replies.begin());
        return r;
    }
};

class Server {
  public:
    Server() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~Server() {
        server_.stop();
        thread_.join();
    }
    httplib::Server& raw() { return server_; }
    std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

  private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

const Query kQuery{"q1", "How do I do it?", Split::tuning};

}  // namespace

TEST_SUITE("remote") {

TEST_CASE("template rendering") {
    CHECK(render_template("Q: {query} A: {answer}", {{"query", "x"}, {"answer", "y"}}) == "Q: x A: y");
    CHECK(render_template("{{\"score\": {n}}}", {{"n", "1"}}) == "{\"score\": 1}");
    CHECK(code_of([] { render_template("{missing}", {}); }) == Errc::config);
    CHECK(code_of([] { render_template("{open", {}); }) == Errc::config);
}

TEST_CASE("json extraction tolerates prose and code fences") {
    CHECK(extract_json("```json\n{\"score\": 0.5}\n```")["score"] == 0.5);
    CHECK(extract_json("Sure! {\"a\": {\"b\": 1}} hope that helps")["a"]["b"] == 1);
    CHECK(code_of([] { extract_json("no json here"); }) == Errc::malformed_response);
    CHECK(code_of([] { extract_json("{not json}"); }) == Errc::malformed_response);
}

TEST_CASE("bundled prompts render for every role") {
    auto t = std::make_shared<ScriptedTransport>();
    RemoteBackend b(t, PromptSet::load((support::source_dir() / "prompts").string()));
    const CandidatePool pool{"q1", 0, {{"q1", "answer one", Origin::base, 0}, {"q1", "answer two", Origin::base, 0}}};

    t->replies = {R"({"reasoning": "r", "rubric": [{"rubric_item": "Cites a source", "weight": 2}]})"};
    ports::ProposerRequest req;
    req.query = kQuery;
    req.candidates = pool;
    req.reference = ReferenceAnswer{"q1", "the reference"};
    req.mode = ProposalMode::contrastive;
    const auto r = b.propose(req);
    REQUIRE(r.items.size() == 1);
    CHECK(r.items[0].criterion == "Cites a source");
    CHECK(t->prompts.back().find("the reference") != std::string::npos);
    CHECK(t->prompts.back().find("answer two") != std::string::npos);

    t->replies = {R"({"rubric": [{"rubric_item": "Is brief", "weight": 1}]})"};
    req.reference.reset();
    RetrievedMemory mem;
    mem.rendered = "## style\n- [+0.500] Is brief\n";
    mem.categories.push_back({"style", {}});
    req.memory = mem;
    req.mode = ProposalMode::memory_driven;
    b.propose(req);
    CHECK(t->prompts.back().find("## style") != std::string::npos);

    t->replies = {R"({"score": 0.75})", R"({"score": 1})"};
    CHECK(b.verify({kQuery, "ans", "Is brief", VerifierMode::scalar, 0}) == 0.75);
    CHECK(b.verify({kQuery, "ans", "Is brief", VerifierMode::binary, 0}) == 1.0);

    t->replies = {R"({"category": "style"})"};
    CHECK(b.categorize({{"style"}, "Is brief"}) == "style");

    t->replies = {"first", "second"};
    const auto rubric = make_rubric("q1", std::vector<RubricItem>{{"Is brief", 1.0}});
    const auto adv = b.generate_adversarial({kQuery, rubric, 2, 1, {}});
    CHECK(adv.candidates.size() == 2);
    CHECK(adv.candidates[1].text == "second");
    CHECK(adv.candidates[1].round == 1);
    CHECK(t->prompts.back().find("Is brief") != std::string::npos);

    t->replies = {"  base  "};
    const auto base = b.generate_answers({kQuery, 1, {}});
    CHECK(base.candidates[0].text == "base");
    CHECK(base.candidates[0].origin == Origin::base);
}

TEST_CASE("malformed replies surface as malformed_response") {
    auto t = std::make_shared<ScriptedTransport>();
    RemoteBackend b(t, PromptSet::load((support::source_dir() / "prompts").string()));
    t->replies = {R"({"verdict": "yes"})"};
    CHECK(code_of([&] { b.verify({kQuery, "ans", "c", VerifierMode::scalar, 0}); }) == Errc::malformed_response);
    t->replies = {R"({"rubric": [{"item": "x"}]})"};
    ports::ProposerRequest req;
    req.query = kQuery;
    req.candidates = {"q1", 0, {{"q1", "a", Origin::base, 0}}};
    req.reference = ReferenceAnswer{"q1", "r"};
    req.mode = ProposalMode::contrastive;
    CHECK(code_of([&] { b.propose(req); }) == Errc::malformed_response);
    t->replies = {"   "};
    CHECK(code_of([&] { b.generate_answers({kQuery, 1, {}}); }) == Errc::malformed_response);
}

TEST_CASE("http transport talks chat completions") {
    Server server;
    nlohmann::json seen;
    std::string auth;
    server.raw().Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        auth = req.get_header_value("Authorization");
        nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "{\"score\": 0.5}"}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    server.raw().Post("/bad/chat/completions", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"unexpected": true})", "application/json");
    });
    server.raw().Post("/down/chat/completions", [](const httplib::Request&, httplib::Response& res) {
        res.status = 503;
        res.set_content("overloaded", "text/plain");
    });

    ::setenv("RUBRICMEM_TEST_KEY", "secret", 1);
    HttpChatTransport ok({server.url("/v1/"), "judge-model", "RUBRICMEM_TEST_KEY", std::chrono::seconds(5), 2});
    CHECK(ok.complete({{"user", "hi"}}, {0.0, 1.0, 9}) == "{\"score\": 0.5}");
    CHECK(seen["model"] == "judge-model");
    CHECK(seen["messages"][0]["content"] == "hi");
    CHECK(seen["temperature"] == 0.0);
    CHECK(auth == "Bearer secret");

    HttpChatTransport bad({server.url("/bad"), "m", "", std::chrono::seconds(5), 1});
    CHECK(code_of([&] { bad.complete({{"user", "hi"}}, {}); }) == Errc::malformed_response);
    HttpChatTransport down({server.url("/down"), "m", "", std::chrono::seconds(5), 1});
    CHECK(code_of([&] { down.complete({{"user", "hi"}}, {}); }) == Errc::backend_unavailable);
    HttpChatTransport nokey({server.url("/v1"), "m", "RUBRICMEM_TEST_UNSET_KEY", std::chrono::seconds(5), 1});
    CHECK(code_of([&] { nokey.complete({{"user", "hi"}}, {}); }) == Errc::config);
    HttpChatTransport refused({"http://127.0.0.1:1", "m", "", std::chrono::seconds(1), 1});
    CHECK(code_of([&] { refused.complete({{"user", "hi"}}, {}); }) == Errc::backend_unavailable);
    CHECK(code_of([] { HttpChatTransport({"localhost", "m", "", std::chrono::seconds(1), 1}); }) == Errc::config);
}

}  // TEST_SUITE
