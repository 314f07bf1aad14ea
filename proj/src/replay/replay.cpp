#include "sswm/replay/replay.hpp"

#include <cstdio>
#include <cstring>

namespace sswm::replay {

using numkit::Dtype;
using numkit::Rng;
using numkit::Tensor;

namespace {
constexpr char kMagic[9] = "SSWMRP01";
}

ReplayBuffer::ReplayBuffer(ReplayConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.capacity < 1) numkit::fail("replay: capacity must be positive");
  if (cfg_.workers < 1) numkit::fail("replay: need at least one worker stream");
  streams_.resize(static_cast<size_t>(cfg_.workers));
  if (!cfg_.spill_path.empty()) {
    FILE* f = std::fopen(cfg_.spill_path.c_str(), "wb");
    if (!f) numkit::fail("replay: cannot open spill file " + cfg_.spill_path);
    std::fwrite(kMagic, 1, 8, f);
    const uint32_t version = 1;
    const uint32_t obs_dim = static_cast<uint32_t>(cfg_.obs_dim);
    std::fwrite(&version, sizeof version, 1, f);
    std::fwrite(&obs_dim, sizeof obs_dim, 1, f);
    spill_file_ = f;
  }
}

ReplayBuffer::~ReplayBuffer() {
  if (spill_file_) std::fclose(static_cast<FILE*>(spill_file_));
}

void ReplayBuffer::append(int64_t worker_id, StepRecord record) {
  if (worker_id < 0 || worker_id >= cfg_.workers)
    numkit::fail("replay: worker id " + std::to_string(worker_id) + " out of range");
  if (static_cast<int64_t>(record.obs.size()) != cfg_.obs_dim)
    numkit::fail("replay: observation width " + std::to_string(record.obs.size()) +
                 " does not match " + std::to_string(cfg_.obs_dim));
  std::lock_guard<std::mutex> lock(mu_);
  Stream& s = streams_[static_cast<size_t>(worker_id)];
  if (s.steps.empty()) s.head_seq = next_seq_;
  s.steps.push_back(record);
  ++next_seq_;
  ++stored_;
  if (spill_file_) {
    FILE* f = static_cast<FILE*>(spill_file_);
    const uint32_t w = static_cast<uint32_t>(worker_id);
    const uint32_t action = static_cast<uint32_t>(record.action);
    const uint8_t cont = record.cont > 0.5f ? 1 : 0;
    const uint8_t first = record.is_first > 0.5f ? 1 : 0;
    std::fwrite(&w, sizeof w, 1, f);
    std::fwrite(&action, sizeof action, 1, f);
    std::fwrite(&record.reward, sizeof record.reward, 1, f);
    std::fwrite(&cont, sizeof cont, 1, f);
    std::fwrite(&first, sizeof first, 1, f);
    std::fwrite(record.obs.data(), sizeof(float), record.obs.size(), f);
  }
  while (stored_ > cfg_.capacity) evict_oldest_locked();
}

void ReplayBuffer::evict_oldest_locked() {
  int64_t oldest = -1;
  uint64_t oldest_seq = UINT64_MAX;
  for (size_t i = 0; i < streams_.size(); ++i) {
    if (streams_[i].steps.empty()) continue;
    if (streams_[i].head_seq < oldest_seq) {
      oldest_seq = streams_[i].head_seq;
      oldest = static_cast<int64_t>(i);
    }
  }
  if (oldest < 0) return;
  Stream& s = streams_[static_cast<size_t>(oldest)];
  s.steps.pop_front();
  ++s.head_seq;
  --stored_;
  ++evicted_;
}

std::optional<wm::SequenceBatchView> ReplayBuffer::sample(int64_t batch, int64_t length, Rng& rng,
                                                          Dtype dt) const {
  if (batch < 1 || length < 1) numkit::fail("replay: batch and length must be positive");
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<int64_t> valid(streams_.size(), 0);
  int64_t total_valid = 0;
  for (size_t i = 0; i < streams_.size(); ++i) {
    const int64_t len = static_cast<int64_t>(streams_[i].steps.size());
    valid[i] = std::max<int64_t>(0, len - length + 1);
    total_valid += valid[i];
  }
  if (total_valid == 0) return std::nullopt;

  wm::SequenceBatchView out;
  out.obs = Tensor::zeros({batch, length, cfg_.obs_dim}, dt);
  out.actions = Tensor::zeros({batch, length, cfg_.action_count}, dt);
  out.reward = Tensor::zeros({batch, length}, dt);
  out.cont = Tensor::zeros({batch, length}, dt);
  out.is_first = Tensor::zeros({batch, length}, dt);
  for (int64_t b = 0; b < batch; ++b) {
    int64_t pick = rng.uniform_int(total_valid);
    size_t stream = 0;
    while (pick >= valid[stream]) {
      pick -= valid[stream];
      ++stream;
    }
    const auto& steps = streams_[stream].steps;
    for (int64_t t = 0; t < length; ++t) {
      const StepRecord& r = steps[static_cast<size_t>(pick + t)];
      for (int64_t i = 0; i < cfg_.obs_dim; ++i)
        out.obs.set((b * length + t) * cfg_.obs_dim + i, r.obs[static_cast<size_t>(i)]);
      if (r.action >= 0 && r.action < cfg_.action_count)
        out.actions.set((b * length + t) * cfg_.action_count + r.action, 1.0);
      out.reward.set(b * length + t, r.reward);
      out.cont.set(b * length + t, r.cont);
      out.is_first.set(b * length + t, r.is_first);
    }
  }
  return out;
}

int64_t ReplayBuffer::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return stored_;
}

int64_t ReplayBuffer::total_appended() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<int64_t>(next_seq_);
}

int64_t ReplayBuffer::evicted() const {
  std::lock_guard<std::mutex> lock(mu_);
  return evicted_;
}

std::vector<ReplayBuffer::SpillRecord> ReplayBuffer::read_spill(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) numkit::fail("replay: cannot open spill file " + path);
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    std::fclose(f);
    numkit::fail("replay: bad spill magic in " + path);
  }
  uint32_t version = 0, obs_dim = 0;
  if (std::fread(&version, sizeof version, 1, f) != 1 ||
      std::fread(&obs_dim, sizeof obs_dim, 1, f) != 1 || version != 1) {
    std::fclose(f);
    numkit::fail("replay: bad spill header in " + path);
  }
  std::vector<SpillRecord> out;
  while (true) {
    SpillRecord sr;
    uint32_t action = 0;
    uint8_t cont = 0, first = 0;
    if (std::fread(&sr.worker, sizeof sr.worker, 1, f) != 1) break;
    if (std::fread(&action, sizeof action, 1, f) != 1 ||
        std::fread(&sr.record.reward, sizeof sr.record.reward, 1, f) != 1 ||
        std::fread(&cont, sizeof cont, 1, f) != 1 || std::fread(&first, sizeof first, 1, f) != 1) {
      std::fclose(f);
      numkit::fail("replay: truncated spill record in " + path);
    }
    sr.record.action = static_cast<int32_t>(action);
    sr.record.cont = cont ? 1.0f : 0.0f;
    sr.record.is_first = first ? 1.0f : 0.0f;
    sr.record.obs.resize(obs_dim);
    if (std::fread(sr.record.obs.data(), sizeof(float), obs_dim, f) != obs_dim) {
      std::fclose(f);
      numkit::fail("replay: truncated spill observation in " + path);
    }
    out.push_back(std::move(sr));
  }
  std::fclose(f);
  return out;
}

}  // namespace sswm::replay
