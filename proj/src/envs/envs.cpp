#include "sswm/envs/envs.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <sstream>

namespace sswm::envs {

using numkit::Rng;

namespace {

void check_action(int64_t action, int64_t count) {
  if (action < 0 || action >= count)
    numkit::fail("env: action " + std::to_string(action) + " out of range [0," +
                 std::to_string(count) + ")");
}

void one_hot(std::vector<float>& obs, int64_t offset, int64_t index) {
  obs[static_cast<size_t>(offset + index)] = 1.0f;
}

class EnvBase : public Env {
 public:
  explicit EnvBase(uint64_t seed) : rng_(seed) {}
  const EnvSpec& spec() const override { return spec_; }

 protected:
  void require_live() const {
    if (done_) numkit::fail("env: step after done; call reset first");
  }
  EnvSpec spec_;
  Rng rng_;
  bool done_ = true;
  int64_t t_ = 0;  // action steps taken this episode
};

// Context bit at t=0 must be recalled at the final step; rewards 0 in between.
class MemoryLengthEnv : public EnvBase {
 public:
  MemoryLengthEnv(int64_t n, uint64_t seed) : EnvBase(seed), n_(n) {
    if (n < 1) numkit::fail("memory_length: N must be >= 1");
    spec_.id = "memory_length:" + std::to_string(n);
    spec_.continuous = 2;  // context signal, time fraction
    spec_.actions = 2;
    spec_.max_len = n + 1;
    spec_.optimal_return = 1.0;
  }

  StepResult reset() override {
    done_ = false;
    t_ = 0;
    context_ = rng_.uniform() < 0.5 ? -1 : 1;
    StepResult r;
    r.is_first = true;
    r.obs = observe();
    return r;
  }

  StepResult step(int64_t action) override {
    require_live();
    check_action(action, 2);
    StepResult r;
    const bool final_step = t_ == n_ - 1;
    if (final_step) {
      const int64_t target = (context_ + 1) / 2;
      r.reward = action == target ? 1.0 : -1.0;
      done_ = true;
      r.done = true;
    }
    ++t_;
    r.obs = observe();
    return r;
  }

 private:
  std::vector<float> observe() const {
    std::vector<float> obs(2, 0.0f);
    if (t_ == 0) obs[0] = static_cast<float>(context_);
    obs[1] = static_cast<float>(t_) / static_cast<float>(n_);
    return obs;
  }
  int64_t n_;
  int64_t context_ = 1;
};

class MemoryLengthOracle : public OraclePolicy {
 public:
  void begin_episode() override { context_ = 0; }
  int64_t act(const std::vector<float>& obs) override {
    if (obs[1] == 0.0f) context_ = obs[0] >= 0 ? 1 : -1;  // t = 0 carries the bit
    return context_ > 0 ? 1 : 0;
  }

 private:
  int context_ = 0;
};

// Only the first of 5 actions matters; its reward arrives after a fixed delay.
class DiscountingChainEnv : public EnvBase {
 public:
  DiscountingChainEnv(int64_t delay, uint64_t seed) : EnvBase(seed), delay_(delay) {
    if (delay < 1) numkit::fail("discounting_chain: delay must be >= 1");
    spec_.id = "discounting_chain:" + std::to_string(delay);
    spec_.continuous = 2;  // time fraction, start marker
    spec_.actions = 5;
    spec_.max_len = delay + 1;
    spec_.optimal_return = 1.1;
  }

  StepResult reset() override {
    done_ = false;
    t_ = 0;
    first_action_ = -1;
    StepResult r;
    r.is_first = true;
    r.obs = observe();
    return r;
  }

  StepResult step(int64_t action) override {
    require_live();
    check_action(action, 5);
    if (t_ == 0) first_action_ = action;
    ++t_;
    StepResult r;
    if (t_ == delay_) {  // reward arrives with the final observation
      r.reward = first_action_ == kOptimalAction ? 1.1 : 1.0;
      r.done = true;
      done_ = true;
    }
    r.obs = observe();
    return r;
  }

  static constexpr int64_t kOptimalAction = 1;

 private:
  std::vector<float> observe() const {
    std::vector<float> obs(2, 0.0f);
    obs[0] = static_cast<float>(t_) / static_cast<float>(delay_);
    if (t_ == 0) obs[1] = 1.0f;
    return obs;
  }
  int64_t delay_;
  int64_t first_action_ = -1;
};

class DiscountingChainOracle : public OraclePolicy {
 public:
  void begin_episode() override {}
  int64_t act(const std::vector<float>& obs) override {
    return obs[1] > 0.5f ? DiscountingChainEnv::kOptimalAction : 0;
  }
};

// a_{t+k} must replicate o_t; observations are i.i.d. over 4 classes.
class RepeatPreviousEnv : public EnvBase {
 public:
  RepeatPreviousEnv(int64_t k, uint64_t seed) : EnvBase(seed), k_(k), total_(2 * k + 48) {
    spec_.id = "repeat_previous:" + name_for(k);
    spec_.categorical = {4};
    spec_.actions = 4;
    spec_.max_len = total_ + 1;
    spec_.optimal_return = 1.0;
  }

  static std::string name_for(int64_t k) {
    if (k == 4) return "easy";
    if (k == 32) return "medium";
    if (k == 64) return "hard";
    return std::to_string(k);
  }

  StepResult reset() override {
    done_ = false;
    t_ = 0;
    history_.clear();
    current_ = rng_.uniform_int(4);
    history_.push_back(current_);
    StepResult r;
    r.is_first = true;
    r.obs = observe();
    return r;
  }

  StepResult step(int64_t action) override {
    require_live();
    check_action(action, 4);
    StepResult r;
    if (t_ >= k_) {
      const double unit = 1.0 / static_cast<double>(total_ - k_);
      r.reward = action == history_[static_cast<size_t>(t_ - k_)] ? unit : -unit;
    }
    ++t_;
    if (t_ == total_) {
      r.done = true;
      done_ = true;
    }
    current_ = rng_.uniform_int(4);
    history_.push_back(current_);
    r.obs = observe();
    return r;
  }

 private:
  std::vector<float> observe() const {
    std::vector<float> obs(4, 0.0f);
    one_hot(obs, 0, current_);
    return obs;
  }
  int64_t k_, total_;
  int64_t current_ = 0;
  std::vector<int64_t> history_;
};

class RepeatPreviousOracle : public OraclePolicy {
 public:
  explicit RepeatPreviousOracle(int64_t k) : k_(k) {}
  void begin_episode() override { seen_.clear(); }
  int64_t act(const std::vector<float>& obs) override {
    int64_t cls = 0;
    for (int64_t i = 0; i < 4; ++i)
      if (obs[static_cast<size_t>(i)] > 0.5f) cls = i;
    seen_.push_back(cls);
    const int64_t t = static_cast<int64_t>(seen_.size()) - 1;
    if (t >= k_) return seen_[static_cast<size_t>(t - k_)];
    return 0;
  }

 private:
  int64_t k_;
  std::vector<int64_t> seen_;
};

// Watch half the episode, then reproduce the observed sequence.
class AutoencodeEnv : public EnvBase {
 public:
  AutoencodeEnv(int64_t total, uint64_t seed) : EnvBase(seed), total_(total) {
    if (total % 2 != 0) numkit::fail("autoencode: episode length must be even");
    spec_.id = "autoencode:" + name_for(total);
    spec_.categorical = {2, 5};  // phase; value 0..3 or null
    spec_.actions = 4;
    spec_.max_len = total + 1;
    spec_.optimal_return = 1.0;
  }

  static std::string name_for(int64_t t) {
    if (t == 104) return "easy";
    if (t == 208) return "medium";
    if (t == 312) return "hard";
    return std::to_string(t);
  }

  StepResult reset() override {
    done_ = false;
    t_ = 0;
    values_.clear();
    for (int64_t i = 0; i < total_ / 2; ++i) values_.push_back(rng_.uniform_int(4));
    StepResult r;
    r.is_first = true;
    r.obs = observe();
    return r;
  }

  StepResult step(int64_t action) override {
    require_live();
    check_action(action, 4);
    StepResult r;
    const int64_t half = total_ / 2;
    if (t_ >= half) {
      const int64_t j = t_ - half;
      const double unit = 2.0 / static_cast<double>(total_);
      r.reward = action == values_[static_cast<size_t>(j)] ? unit : -unit;
    }
    ++t_;
    if (t_ == total_) {
      r.done = true;
      done_ = true;
    }
    r.obs = observe();
    return r;
  }

 private:
  std::vector<float> observe() const {
    std::vector<float> obs(7, 0.0f);
    const bool watch = t_ < total_ / 2;
    one_hot(obs, 0, watch ? 0 : 1);
    if (watch)
      one_hot(obs, 2, values_[static_cast<size_t>(t_)]);
    else
      one_hot(obs, 2, 4);  // null value
    return obs;
  }
  int64_t total_;
  std::vector<int64_t> values_;
};

class AutoencodeOracle : public OraclePolicy {
 public:
  void begin_episode() override {
    stored_.clear();
    replay_pos_ = 0;
  }
  int64_t act(const std::vector<float>& obs) override {
    const bool watch = obs[0] > 0.5f;
    if (watch) {
      for (int64_t v = 0; v < 4; ++v)
        if (obs[static_cast<size_t>(2 + v)] > 0.5f) stored_.push_back(v);
      return 0;
    }
    if (replay_pos_ < static_cast<int64_t>(stored_.size()))
      return stored_[static_cast<size_t>(replay_pos_++)];
    return 0;
  }

 private:
  std::vector<int64_t> stored_;
  int64_t replay_pos_ = 0;
};

// Card-matching: one flip per step, pairs resolved on consecutive steps.
class ConcentrationEnv : public EnvBase {
 public:
  struct Setup {
    int64_t deck, values, budget;
    double optimal;  // Monte-Carlo estimate of the bundled oracle's mean return
  };

  static Setup setup_for(const std::string& difficulty) {
    if (difficulty == "easy") return {52, 3, 104, kOptimalEasy};
    if (difficulty == "medium") return {104, 3, 208, kOptimalMedium};
    if (difficulty == "hard") return {52, 14, 104, kOptimalHard};
    numkit::fail("concentration: unknown difficulty '" + difficulty + "'");
  }

  // frozen oracle means (10k-episode Monte-Carlo, re-verified by the test suite)
  static constexpr double kOptimalEasy = 0.6670;
  static constexpr double kOptimalMedium = 0.6671;
  static constexpr double kOptimalHard = 0.5370;

  ConcentrationEnv(const std::string& difficulty, uint64_t seed)
      : EnvBase(seed), cfg_(setup_for(difficulty)) {
    spec_.id = "concentration:" + difficulty;
    spec_.categorical.assign(static_cast<size_t>(cfg_.deck), cfg_.values + 2);
    spec_.actions = cfg_.deck;
    spec_.max_len = cfg_.budget + 1;
    spec_.optimal_return = cfg_.optimal;
  }

  StepResult reset() override {
    done_ = false;
    t_ = 0;
    pending_ = -1;
    // even per-value card counts so the whole deck is matchable
    card_value_.clear();
    for (int64_t p = 0; p < cfg_.deck / 2; ++p) card_value_.push_back(p % cfg_.values);
    const auto pairs = card_value_;
    card_value_.insert(card_value_.end(), pairs.begin(), pairs.end());
    for (int64_t i = static_cast<int64_t>(card_value_.size()) - 1; i > 0; --i) {
      const int64_t j = rng_.uniform_int(i + 1);
      std::swap(card_value_[static_cast<size_t>(i)], card_value_[static_cast<size_t>(j)]);
    }
    matched_.assign(card_value_.size(), false);
    StepResult r;
    r.is_first = true;
    r.obs = observe();
    return r;
  }

  StepResult step(int64_t action) override {
    require_live();
    check_action(action, cfg_.deck);
    StepResult r;
    if (pending_ < 0) {
      pending_ = action;  // first card of the pair; shown face-up in the next observation
    } else {
      const bool valid = action != pending_ && !matched_[static_cast<size_t>(action)] &&
                         !matched_[static_cast<size_t>(pending_)];
      const bool match = valid && card_value_[static_cast<size_t>(action)] ==
                                      card_value_[static_cast<size_t>(pending_)];
      if (match) {
        matched_[static_cast<size_t>(action)] = true;
        matched_[static_cast<size_t>(pending_)] = true;
        r.reward = 2.0 / static_cast<double>(cfg_.deck);
      } else {
        r.reward = -2.0 / static_cast<double>(cfg_.budget);
      }
      pending_ = -1;
    }
    ++t_;
    const bool all_matched =
        std::all_of(matched_.begin(), matched_.end(), [](bool m) { return m; });
    if (all_matched || t_ >= cfg_.budget) {
      r.done = true;
      done_ = true;
    }
    r.obs = observe();
    return r;
  }

 private:
  std::vector<float> observe() const {
    std::vector<float> obs(static_cast<size_t>(cfg_.deck * (cfg_.values + 2)), 0.0f);
    for (int64_t p = 0; p < cfg_.deck; ++p) {
      const int64_t base = p * (cfg_.values + 2);
      if (matched_[static_cast<size_t>(p)])
        one_hot(obs, base, 1);
      else if (p == pending_)
        one_hot(obs, base, 2 + card_value_[static_cast<size_t>(p)]);
      else
        one_hot(obs, base, 0);  // face down
    }
    return obs;
  }

  Setup cfg_;
  std::vector<int64_t> card_value_;
  std::vector<bool> matched_;
  int64_t pending_ = -1;
};

// Remembers every card revealed so far; flips known pairs when available,
// otherwise reveals the lowest-index unseen card.
class ConcentrationOracle : public OraclePolicy {
 public:
  explicit ConcentrationOracle(int64_t deck, int64_t values) : deck_(deck), values_(values) {}

  void begin_episode() override {
    known_.assign(static_cast<size_t>(deck_), -1);
    pending_ = -1;
  }

  int64_t act(const std::vector<float>& obs) override {
    const int64_t classes = values_ + 2;
    std::vector<bool> matched(static_cast<size_t>(deck_), false);
    for (int64_t p = 0; p < deck_; ++p) {
      const int64_t base = p * classes;
      if (obs[static_cast<size_t>(base + 1)] > 0.5f) {
        matched[static_cast<size_t>(p)] = true;
        known_[static_cast<size_t>(p)] = -2;  // out of play
      }
      for (int64_t v = 0; v < values_; ++v)
        if (obs[static_cast<size_t>(base + 2 + v)] > 0.5f) known_[static_cast<size_t>(p)] = v;
    }
    int64_t face_up = -1;
    for (int64_t p = 0; p < deck_; ++p) {
      const int64_t base = p * classes;
      bool up = false;
      for (int64_t v = 0; v < values_; ++v)
        if (obs[static_cast<size_t>(base + 2 + v)] > 0.5f) up = true;
      if (up) face_up = p;
    }

    auto unseen = [&]() {
      for (int64_t p = 0; p < deck_; ++p)
        if (!matched[static_cast<size_t>(p)] && known_[static_cast<size_t>(p)] == -1 &&
            p != face_up)
          return p;
      // everything seen: flip any unmatched card that is not the pending one
      for (int64_t p = 0; p < deck_; ++p)
        if (!matched[static_cast<size_t>(p)] && p != face_up) return p;
      return int64_t{0};
    };

    if (face_up >= 0) {
      // second flip: look for a known partner of the revealed value
      const int64_t v = known_[static_cast<size_t>(face_up)];
      for (int64_t p = 0; p < deck_; ++p)
        if (p != face_up && !matched[static_cast<size_t>(p)] &&
            known_[static_cast<size_t>(p)] == v)
          return p;
      return unseen();
    }
    // first flip: complete a known pair if one exists
    for (int64_t a = 0; a < deck_; ++a) {
      if (matched[static_cast<size_t>(a)] || known_[static_cast<size_t>(a)] < 0) continue;
      for (int64_t b = a + 1; b < deck_; ++b)
        if (!matched[static_cast<size_t>(b)] &&
            known_[static_cast<size_t>(b)] == known_[static_cast<size_t>(a)])
          return a;
    }
    return unseen();
  }

 private:
  int64_t deck_, values_;
  std::vector<int64_t> known_;
  int64_t pending_ = -1;
};

struct ParsedId {
  std::string family, param;
};

ParsedId parse_id(const std::string& id) {
  const auto pos = id.find(':');
  if (pos == std::string::npos) numkit::fail("env id '" + id + "' must be family:param");
  return {id.substr(0, pos), id.substr(pos + 1)};
}

int64_t parse_int(const std::string& s, const std::string& id) {
  try {
    return std::stoll(s);
  } catch (...) {
    numkit::fail("env id '" + id + "': expected an integer parameter");
  }
}

int64_t repeat_k(const std::string& p, const std::string& id) {
  if (p == "easy") return 4;
  if (p == "medium") return 32;
  if (p == "hard") return 64;
  return parse_int(p, id);
}

int64_t autoencode_len(const std::string& p, const std::string& id) {
  if (p == "easy") return 104;
  if (p == "medium") return 208;
  if (p == "hard") return 312;
  return parse_int(p, id);
}

}  // namespace

std::unique_ptr<Env> make_env(const std::string& id, uint64_t seed) {
  const ParsedId p = parse_id(id);
  if (p.family == "memory_length")
    return std::make_unique<MemoryLengthEnv>(parse_int(p.param, id), seed);
  if (p.family == "discounting_chain")
    return std::make_unique<DiscountingChainEnv>(parse_int(p.param, id), seed);
  if (p.family == "repeat_previous")
    return std::make_unique<RepeatPreviousEnv>(repeat_k(p.param, id), seed);
  if (p.family == "autoencode")
    return std::make_unique<AutoencodeEnv>(autoencode_len(p.param, id), seed);
  if (p.family == "concentration") return std::make_unique<ConcentrationEnv>(p.param, seed);
  numkit::fail("unknown env family '" + p.family + "'");
}

std::unique_ptr<OraclePolicy> make_oracle(const std::string& id) {
  const ParsedId p = parse_id(id);
  if (p.family == "memory_length") return std::make_unique<MemoryLengthOracle>();
  if (p.family == "discounting_chain") return std::make_unique<DiscountingChainOracle>();
  if (p.family == "repeat_previous")
    return std::make_unique<RepeatPreviousOracle>(repeat_k(p.param, id));
  if (p.family == "autoencode") return std::make_unique<AutoencodeOracle>();
  if (p.family == "concentration") {
    const auto s = ConcentrationEnv::setup_for(p.param);
    return std::make_unique<ConcentrationOracle>(s.deck, s.values);
  }
  numkit::fail("unknown env family '" + p.family + "'");
}

EnvSpec env_spec(const std::string& id) { return make_env(id, 0)->spec(); }

std::string spec_dump(const std::string& id) {
  const EnvSpec s = env_spec(id);
  std::ostringstream os;
  os << "id: " << s.id << "\n";
  os << "observation:\n";
  for (size_t i = 0; i < s.categorical.size(); ++i)
    os << "  categorical[" << i << "]: " << s.categorical[i] << " classes\n";
  if (s.continuous > 0) os << "  continuous: " << s.continuous << " dims\n";
  os << "obs_dim: " << s.obs_dim() << "\n";
  os << "actions: " << s.actions << "\n";
  os << "max_episode_records: " << s.max_len << "\n";
  os << "optimal_return: " << s.optimal_return << "\n";
  return os.str();
}

double run_episode(Env& env, OraclePolicy& policy) {
  policy.begin_episode();
  StepResult r = env.reset();
  double total = 0.0;
  while (!r.done) {
    const int64_t a = policy.act(r.obs);
    r = env.step(a);
    total += r.reward;
  }
  return total;
}

}  // namespace sswm::envs
