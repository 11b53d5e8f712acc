#pragma once

// Run-directory layout and persistence for the dual loop:
//
//   config.json                    resolved config snapshot
//   state.json                     {"status": running|completed|failed, ...}
//   metrics.jsonl                  one IterationMetrics per line
//   item_rewards.jsonl             one ItemRewardRecord per line
//   audit.jsonl                    every model call attempt
//   bank.json                      final bank
//   checkpoints/round_<s>.json     LoopState at the start of round s
//   checkpoints/bank_r<s>_t<t>.json  bank after iteration t
//   pools/round_<s>.json           pools used during round s
//   rounds/round_<s>.json          round rubrics and validation curve
//   LOCK                           held while a command owns the directory

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "rubricmem/loop.hpp"

namespace rubricmem::loop {

namespace fs = std::filesystem;

/// Writes via a temporary file and rename.
void write_file_atomic(const fs::path& path, const std::string& content);
std::string read_file(const fs::path& path);

/// Exclusive lock on a run directory (O_EXCL lock file). Throws Errc::config
/// when another process holds it.
class RunLock {
  public:
    explicit RunLock(const fs::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    fs::path path_;
};

enum class RunStatus { absent, running, completed, failed };

RunStatus read_status(const fs::path& dir);
void write_status(const fs::path& dir, RunStatus status, const nlohmann::json& extra = {});

struct BankCheckpoint {
    int round = 0;
    std::int64_t t = 0;
    fs::path path;
};

/// All per-iteration bank checkpoints ordered by (round, t).
std::vector<BankCheckpoint> list_bank_checkpoints(const fs::path& dir);

/// Rounds that have a start-of-round checkpoint, ascending.
std::vector<int> list_round_checkpoints(const fs::path& dir);
LoopState load_round_checkpoint(const fs::path& dir, int round);

/// Drops metrics / item-reward lines from round >= `round`, so a resumed run
/// appends exactly what an uninterrupted run would have written.
void truncate_from_round(const fs::path& dir, int round);

std::vector<IterationMetrics> read_metrics(const fs::path& dir);

/// Observer that persists everything the engine reports.
class RunRecorder final : public Observer {
  public:
    explicit RunRecorder(fs::path dir);

    void on_round_start(const LoopState& state) override;
    void on_item_rewards(std::span<const verify::ItemRewardRecord> records) override;
    void on_iteration(const IterationMetrics& metrics, const memory::MemoryBank& bank) override;
    void on_round_end(const RoundResult& round, const PoolMap& old_pools) override;

    void finish(const LoopState& final_state);

  private:
    void append(const fs::path& path, const std::string& line);

    fs::path dir_;
};

}  // namespace rubricmem::loop
