#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sswm/numkit/rng.hpp"

namespace sswm::envs {

// Observation layout mirrors the world-model convention: one-hot categorical
// blocks first, continuous dims after, time features scaled to [0,1].
struct EnvSpec {
  std::string id;
  std::vector<int64_t> categorical;
  int64_t continuous = 0;
  int64_t actions = 0;
  int64_t max_len = 0;  // records per episode, including the terminal step
  double optimal_return = 0.0;
  int64_t obs_dim() const {
    int64_t d = continuous;
    for (int64_t c : categorical) d += c;
    return d;
  }
};

struct StepResult {
  std::vector<float> obs;
  double reward = 0.0;
  bool done = false;
  bool is_first = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual StepResult reset() = 0;
  // Rejects out-of-range actions. Calling step after done without reset is rejected.
  virtual StepResult step(int64_t action) = 0;
};

// Observation-driven reference policy achieving the declared optimal return.
class OraclePolicy {
 public:
  virtual ~OraclePolicy() = default;
  virtual void begin_episode() = 0;
  virtual int64_t act(const std::vector<float>& obs) = 0;
};

// ids: memory_length:<N>, discounting_chain:<delay>, repeat_previous:easy|medium|hard,
// autoencode:easy|medium|hard, concentration:easy|medium|hard
std::unique_ptr<Env> make_env(const std::string& id, uint64_t seed);
std::unique_ptr<OraclePolicy> make_oracle(const std::string& id);
EnvSpec env_spec(const std::string& id);
std::string spec_dump(const std::string& id);

// Convenience for tests and evaluation: runs one episode, returns the summed reward.
double run_episode(Env& env, OraclePolicy& policy);

}  // namespace sswm::envs
