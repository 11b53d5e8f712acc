#include "rubricmem/rundir.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <regex>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rubricmem/errors.hpp"

namespace rubricmem::loop {

namespace {

constexpr const char* kLockName = "LOCK";

std::string_view status_name(RunStatus s) {
    switch (s) {
        case RunStatus::running: return "running";
        case RunStatus::completed: return "completed";
        case RunStatus::failed: return "failed";
        case RunStatus::absent: break;
    }
    return "absent";
}

void filter_jsonl(const fs::path& path, const char* field, int round) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains(field)) throw Error(Errc::data, "unreadable line in " + path.string());
        if (j.at(field).get<int>() < round) kept += line + "\n";
    }
    in.close();
    write_file_atomic(path, kept);
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(Errc::io, "cannot write " + tmp.string());
        out << content;
        if (!out) throw Error(Errc::io, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

RunLock::RunLock(const fs::path& dir) : path_(dir / kLockName) {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) {
            throw Error(Errc::config, "run directory " + dir.string() + " is locked by another command (" +
                                          path_.string() + ")");
        }
        throw Error(Errc::io, "cannot create lock file: " + std::string(std::strerror(errno)));
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

RunStatus read_status(const fs::path& dir) {
    const auto path = dir / "state.json";
    if (!fs::exists(path)) return RunStatus::absent;
    const auto j = nlohmann::json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw Error(Errc::data, "corrupt " + path.string());
    const auto s = j.value("status", "");
    if (s == "running") return RunStatus::running;
    if (s == "completed") return RunStatus::completed;
    if (s == "failed") return RunStatus::failed;
    throw Error(Errc::data, "unknown run status '" + s + "'");
}

void write_status(const fs::path& dir, RunStatus status, const nlohmann::json& extra) {
    nlohmann::json j = extra.is_object() ? extra : nlohmann::json::object();
    j["status"] = status_name(status);
    write_file_atomic(dir / "state.json", j.dump(2) + "\n");
}

std::vector<BankCheckpoint> list_bank_checkpoints(const fs::path& dir) {
    std::vector<BankCheckpoint> out;
    const auto cdir = dir / "checkpoints";
    if (!fs::exists(cdir)) return out;
    static const std::regex pattern(R"(bank_r(\d+)_t(\d+)\.json)");
    for (const auto& entry : fs::directory_iterator(cdir)) {
        std::smatch m;
        const auto name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern)) {
            out.push_back({std::stoi(m[1]), std::stoll(m[2]), entry.path()});
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return std::tie(a.round, a.t) < std::tie(b.round, b.t);
    });
    return out;
}

std::vector<int> list_round_checkpoints(const fs::path& dir) {
    std::vector<int> out;
    const auto cdir = dir / "checkpoints";
    if (!fs::exists(cdir)) return out;
    static const std::regex pattern(R"(round_(\d+)\.json)");
    for (const auto& entry : fs::directory_iterator(cdir)) {
        std::smatch m;
        const auto name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern)) out.push_back(std::stoi(m[1]));
    }
    std::sort(out.begin(), out.end());
    return out;
}

LoopState load_round_checkpoint(const fs::path& dir, int round) {
    const auto path = dir / "checkpoints" / fmt::format("round_{}.json", round);
    if (!fs::exists(path)) throw Error(Errc::config, "no checkpoint for round " + std::to_string(round));
    try {
        return nlohmann::json::parse(read_file(path)).get<LoopState>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::corrupt_snapshot, path.string() + ": " + e.what());
    }
}

void truncate_from_round(const fs::path& dir, int round) {
    filter_jsonl(dir / "metrics.jsonl", "s", round);
    filter_jsonl(dir / "item_rewards.jsonl", "round", round);
    for (const auto& c : list_bank_checkpoints(dir)) {
        if (c.round >= round) fs::remove(c.path);
    }
}

std::vector<IterationMetrics> read_metrics(const fs::path& dir) {
    std::vector<IterationMetrics> out;
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<IterationMetrics>());
    }
    return out;
}

RunRecorder::RunRecorder(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_ / "checkpoints");
    fs::create_directories(dir_ / "pools");
    fs::create_directories(dir_ / "rounds");
}

void RunRecorder::append(const fs::path& path, const std::string& line) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw Error(Errc::io, "cannot append to " + path.string());
    out << line << '\n';
}

void RunRecorder::on_round_start(const LoopState& state) {
    nlohmann::json j = state;
    write_file_atomic(dir_ / "checkpoints" / fmt::format("round_{}.json", state.round), j.dump() + "\n");
    write_status(dir_, RunStatus::running, {{"round", state.round}, {"next_t", state.next_t}});
}

void RunRecorder::on_item_rewards(std::span<const verify::ItemRewardRecord> records) {
    for (const auto& r : records) append(dir_ / "item_rewards.jsonl", nlohmann::json(r).dump());
}

void RunRecorder::on_iteration(const IterationMetrics& metrics, const memory::MemoryBank& bank) {
    append(dir_ / "metrics.jsonl", nlohmann::json(metrics).dump());
    memory::snapshot(bank, (dir_ / "checkpoints" / fmt::format("bank_r{}_t{}.json", metrics.s, metrics.t)).string());
}

void RunRecorder::on_round_end(const RoundResult& round, const PoolMap& old_pools) {
    nlohmann::json pools = nlohmann::json::array();
    for (const auto& [id, p] : old_pools) pools.push_back(p);
    write_file_atomic(dir_ / "pools" / fmt::format("round_{}.json", round.s), pools.dump(2) + "\n");
    write_file_atomic(dir_ / "rounds" / fmt::format("round_{}.json", round.s), nlohmann::json(round).dump(2) + "\n");
}

void RunRecorder::finish(const LoopState& final_state) {
    memory::snapshot(final_state.bank, (dir_ / "bank.json").string());
    nlohmann::json j = final_state;
    write_file_atomic(dir_ / "final_state.json", j.dump() + "\n");
    write_status(dir_, RunStatus::completed,
                 {{"round", final_state.round}, {"next_t", final_state.next_t},
                  {"bank_version", final_state.bank.version()}});
}

}  // namespace rubricmem::loop
