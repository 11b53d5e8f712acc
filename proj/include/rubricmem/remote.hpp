#pragma once

// Chat-completion backed model ports. Prompts are text templates with
// {placeholder} fields ("{{" and "}}" produce literal braces); replies are
// parsed as JSON objects, tolerating markdown code fences around them.

#include <chrono>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/ports.hpp"

namespace rubricmem::remote {

struct ChatMessage {
    std::string role;
    std::string content;
};

class ChatTransport {
  public:
    virtual ~ChatTransport() = default;
    /// Returns the assistant message content. Throws Errc::backend_unavailable
    /// on transport or HTTP errors and Errc::malformed_response on an
    /// unparseable envelope.
    virtual std::string complete(const std::vector<ChatMessage>& messages, const ports::Decoding& decoding) = 0;
};

struct HttpOptions {
    /// Base URL, e.g. "https://api.example.com/v1"; "/chat/completions" is appended.
    std::string endpoint;
    std::string model;
    /// Name of the environment variable holding the bearer token (may be empty).
    std::string api_key_env;
    std::chrono::seconds timeout{60};
    std::size_t max_concurrency = 4;
};

/// Counting semaphore limiting in-flight requests per transport.
class ConcurrencyLimit {
  public:
    explicit ConcurrencyLimit(std::size_t n) : available_(n == 0 ? 1 : n) {}
    void acquire();
    void release();

  private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::size_t available_;
};

class HttpChatTransport final : public ChatTransport {
  public:
    explicit HttpChatTransport(HttpOptions options);
    std::string complete(const std::vector<ChatMessage>& messages, const ports::Decoding& decoding) override;

  private:
    HttpOptions options_;
    std::string scheme_host_;
    std::string path_prefix_;
    ConcurrencyLimit limit_;
};

/// Replaces {name} fields. Throws Errc::config for an unknown or unterminated field.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars);

/// First JSON object in a reply (code fences stripped). Throws
/// Errc::malformed_response when there is none.
nlohmann::json extract_json(std::string_view content);

struct PromptSet {
    std::string proposer_contrastive;
    std::string proposer_memory;
    std::string verifier_scalar;
    std::string verifier_binary;
    std::string categorizer;
    std::string adversary;
    std::string answer;

    /// Loads <dir>/<name>.txt for every field.
    static PromptSet load(const std::string& dir);
};

/// One role-agnostic backend; the config decides which roles it serves.
class RemoteBackend final : public ports::RubricProposer,
                            public ports::Verifier,
                            public ports::Categorizer,
                            public ports::Adversary,
                            public ports::AnswerModel {
  public:
    RemoteBackend(std::shared_ptr<ChatTransport> transport, PromptSet prompts);

    Rubric propose(const ports::ProposerRequest& req) override;
    double verify(const ports::VerifierRequest& req) override;
    std::string categorize(const ports::CategorizerRequest& req) override;
    CandidatePool generate_adversarial(const ports::AdversaryRequest& req) override;
    CandidatePool generate_answers(const ports::AnswerRequest& req) override;

  private:
    std::string ask(const std::string& prompt, const ports::Decoding& decoding);

    std::shared_ptr<ChatTransport> transport_;
    PromptSet prompts_;
};

/// Candidate list rendered for prompts: "### Candidate 1\n<text>\n\n...".
std::string render_candidates(const CandidatePool& pool);
/// Rubric rendered for prompts: "- (0.250) <criterion>" per line.
std::string render_rubric(const Rubric& rubric);

}  // namespace rubricmem::remote
