#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "rubricmem/remote.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "rubricmem/digest.hpp"
#include "rubricmem/errors.hpp"

namespace rubricmem::remote {

namespace {

std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::config, "cannot read prompt template " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

class LimitGuard {
  public:
    explicit LimitGuard(ConcurrencyLimit& l) : l_(l) { l_.acquire(); }
    ~LimitGuard() { l_.release(); }
    LimitGuard(const LimitGuard&) = delete;
    LimitGuard& operator=(const LimitGuard&) = delete;

  private:
    ConcurrencyLimit& l_;
};

}  // namespace

void ConcurrencyLimit::acquire() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return available_ > 0; });
    --available_;
}

void ConcurrencyLimit::release() {
    {
        std::lock_guard lock(mutex_);
        ++available_;
    }
    cv_.notify_one();
}

HttpChatTransport::HttpChatTransport(HttpOptions options)
    : options_(std::move(options)), limit_(options_.max_concurrency) {
    const auto scheme_end = options_.endpoint.find("://");
    if (scheme_end == std::string::npos) throw Error(Errc::config, "endpoint must be an http(s) URL");
    const auto path_start = options_.endpoint.find('/', scheme_end + 3);
    scheme_host_ = options_.endpoint.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : options_.endpoint.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    if (options_.model.empty()) throw Error(Errc::config, "remote backend needs a model name");
}

std::string HttpChatTransport::complete(const std::vector<ChatMessage>& messages, const ports::Decoding& decoding) {
    nlohmann::json body = {{"model", options_.model},
                           {"temperature", decoding.temperature},
                           {"top_p", decoding.nucleus_p},
                           {"seed", decoding.seed & 0x7fffffffULL}};
    body["messages"] = nlohmann::json::array();
    for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});

    httplib::Headers headers;
    if (!options_.api_key_env.empty()) {
        const char* key = std::getenv(options_.api_key_env.c_str());
        if (!key || !*key) {
            throw Error(Errc::config, "environment variable " + options_.api_key_env + " is not set");
        }
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    LimitGuard guard(limit_);
    httplib::Client client(scheme_host_);
    client.set_connection_timeout(options_.timeout);
    client.set_read_timeout(options_.timeout);
    client.set_write_timeout(options_.timeout);
    auto res = client.Post(path_prefix_ + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) {
        throw Error(Errc::backend_unavailable, "request failed: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw Error(Errc::backend_unavailable, fmt::format("HTTP {}: {}", res->status, res->body.substr(0, 200)));
    }
    const auto reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) throw Error(Errc::malformed_response, "response body is not JSON");
    try {
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::malformed_response, std::string("unexpected completion envelope: ") + e.what());
    }
}

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tmpl.size());
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        const char c = tmpl[i];
        if (c == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
            out += '{';
            ++i;
        } else if (c == '}' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
            out += '}';
            ++i;
        } else if (c == '{') {
            const auto close = tmpl.find('}', i);
            if (close == std::string_view::npos) throw Error(Errc::config, "unterminated template field");
            const std::string name(tmpl.substr(i + 1, close - i - 1));
            auto it = vars.find(name);
            if (it == vars.end()) throw Error(Errc::config, "unknown template field {" + name + "}");
            out += it->second;
            i = close;
        } else {
            out += c;
        }
    }
    return out;
}

nlohmann::json extract_json(std::string_view content) {
    const auto open = content.find('{');
    const auto close = content.rfind('}');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
        throw Error(Errc::malformed_response, "reply contains no JSON object");
    }
    auto j = nlohmann::json::parse(content.substr(open, close - open + 1), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(Errc::malformed_response, "reply JSON does not parse");
    return j;
}

PromptSet PromptSet::load(const std::string& dir) {
    auto file = [&](const char* name) { return read_text(dir + "/" + name + ".txt"); };
    return {file("proposer_contrastive"), file("proposer_memory"), file("verifier_scalar"), file("verifier_binary"),
            file("categorizer"),          file("adversary"),       file("answer")};
}

std::string render_candidates(const CandidatePool& pool) {
    std::string out;
    for (std::size_t i = 0; i < pool.candidates.size(); ++i) {
        out += fmt::format("### Candidate {}\n{}\n\n", i + 1, pool.candidates[i].text);
    }
    return out;
}

std::string render_rubric(const Rubric& rubric) {
    std::string out;
    for (const auto& item : rubric.items) out += fmt::format("- ({:.3f}) {}\n", item.weight, item.criterion);
    return out;
}

RemoteBackend::RemoteBackend(std::shared_ptr<ChatTransport> transport, PromptSet prompts)
    : transport_(std::move(transport)), prompts_(std::move(prompts)) {
    if (!transport_) throw Error(Errc::config, "remote backend needs a transport");
}

std::string RemoteBackend::ask(const std::string& prompt, const ports::Decoding& decoding) {
    return transport_->complete({{"user", prompt}}, decoding);
}

Rubric RemoteBackend::propose(const ports::ProposerRequest& req) {
    ports::check_mode(req);
    std::map<std::string, std::string> vars{{"query", req.query.text},
                                            {"candidates", render_candidates(req.candidates)}};
    std::string prompt;
    if (req.mode == ProposalMode::contrastive) {
        vars["reference"] = req.reference->text;
        prompt = render_template(prompts_.proposer_contrastive, vars);
    } else {
        vars["memory"] = req.memory->empty() ? "(memory is empty)" : req.memory->rendered;
        prompt = render_template(prompts_.proposer_memory, vars);
    }
    const auto j = extract_json(ask(prompt, req.decoding));
    Rubric out{req.query.id, {}, std::nullopt};
    try {
        for (const auto& item : j.at("rubric")) {
            out.items.push_back({item.at("rubric_item").get<std::string>(), item.at("weight").get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::malformed_response, std::string("proposer reply: ") + e.what());
    }
    return out;
}

double RemoteBackend::verify(const ports::VerifierRequest& req) {
    const auto& tmpl = req.mode == VerifierMode::binary ? prompts_.verifier_binary : prompts_.verifier_scalar;
    const auto prompt =
        render_template(tmpl, {{"query", req.query.text}, {"answer", req.answer}, {"criterion", req.criterion}});
    // Repetitions differ only in their sampling seed.
    const ports::Decoding decoding{1.0, 1.0,
                                   derive_seed(0, {req.query.id, req.answer, req.criterion, std::to_string(req.sample)})};
    const auto j = extract_json(ask(prompt, decoding));
    const auto it = j.find("score");
    if (it == j.end() || !it->is_number()) throw Error(Errc::malformed_response, "verifier reply has no numeric score");
    return it->get<double>();
}

std::string RemoteBackend::categorize(const ports::CategorizerRequest& req) {
    std::string existing;
    for (const auto& c : req.existing_categories) existing += "- " + c + "\n";
    if (existing.empty()) existing = "(no categories yet)\n";
    const auto prompt = render_template(prompts_.categorizer, {{"criterion", req.criterion}, {"categories", existing}});
    const auto j = extract_json(ask(prompt, {0.0, 1.0, 0}));
    const auto it = j.find("category");
    if (it == j.end() || !it->is_string()) throw Error(Errc::malformed_response, "categorizer reply has no category");
    return it->get<std::string>();
}

CandidatePool RemoteBackend::generate_adversarial(const ports::AdversaryRequest& req) {
    CandidatePool pool{req.query.id, req.round, {}};
    for (int j = 0; j < req.num_candidates; ++j) {
        const auto prompt = render_template(
            prompts_.adversary,
            {{"query", req.query.text}, {"rubric", render_rubric(req.rubric)}, {"index", std::to_string(j + 1)}});
        ports::Decoding d = req.decoding;
        d.seed = derive_seed(d.seed, {"candidate", std::to_string(j)});
        auto text = trim(ask(prompt, d));
        if (text.empty()) throw Error(Errc::malformed_response, "adversary returned an empty answer");
        pool.candidates.push_back({req.query.id, std::move(text), Origin::adversarial, req.round});
    }
    return pool;
}

CandidatePool RemoteBackend::generate_answers(const ports::AnswerRequest& req) {
    CandidatePool pool{req.query.id, 0, {}};
    for (int j = 0; j < req.num_candidates; ++j) {
        const auto prompt = render_template(prompts_.answer, {{"query", req.query.text}, {"index", std::to_string(j + 1)}});
        ports::Decoding d = req.decoding;
        d.seed = derive_seed(d.seed, {"candidate", std::to_string(j)});
        auto text = trim(ask(prompt, d));
        if (text.empty()) throw Error(Errc::malformed_response, "answer model returned an empty answer");
        pool.candidates.push_back({req.query.id, std::move(text), Origin::base, 0});
    }
    return pool;
}

}  // namespace rubricmem::remote
