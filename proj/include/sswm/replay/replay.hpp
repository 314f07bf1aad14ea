#pragma once

#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sswm/numkit/rng.hpp"
#include "sswm/wm/world_model.hpp"

namespace sswm::replay {

struct StepRecord {
  std::vector<float> obs;
  int32_t action = 0;
  float reward = 0.0f;
  float cont = 1.0f;      // 1 - done
  float is_first = 0.0f;  // 1 exactly at episode starts
};

struct ReplayConfig {
  int64_t capacity = 10'000'000;  // steps, FIFO across all worker streams
  int64_t obs_dim = 0;
  int64_t action_count = 0;
  int64_t workers = 1;
  std::string spill_path;  // optional append-only on-disk record stream
};

// FIFO step-stream buffer with uniform fixed-length sequence sampling.
// Concurrent appenders (one per worker) and one sampler are supported; sampling
// copies under the lock so a sequence never mixes pre- and post-eviction data.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(ReplayConfig cfg);
  ~ReplayBuffer();

  void append(int64_t worker_id, StepRecord record);

  // Uniform over all valid (stream, offset) windows; nullopt until at least one
  // stream holds L steps.
  std::optional<wm::SequenceBatchView> sample(int64_t batch, int64_t length, numkit::Rng& rng,
                                              numkit::Dtype dt) const;

  int64_t size() const;
  int64_t total_appended() const;
  int64_t evicted() const;

  // spill-file side: "SSWMRP01" magic, then fixed-width little-endian records
  struct SpillRecord {
    uint32_t worker;
    StepRecord record;
  };
  static std::vector<SpillRecord> read_spill(const std::string& path);

 private:
  void evict_oldest_locked();

  ReplayConfig cfg_;
  mutable std::mutex mu_;
  struct Stream {
    std::deque<StepRecord> steps;
    uint64_t head_seq = 0;  // global append sequence of steps.front()
  };
  std::vector<Stream> streams_;
  uint64_t next_seq_ = 0;
  int64_t stored_ = 0;
  int64_t evicted_ = 0;
  void* spill_file_ = nullptr;
};

}  // namespace sswm::replay
