#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "p2r/model.hpp"

namespace p2r {

// Linear warmup from 0 to `peak`, then cosine decay to 0 at total_steps.
struct LrSchedule {
  float peak = 2e-4f;
  std::int64_t warmup_steps = 1;
  std::int64_t total_steps = 1;

  static LrSchedule cosine(float peak, double warmup_ratio, std::int64_t total_steps);
  float at(std::int64_t step) const;
};

struct AdamWSettings {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;  // applied to matrices only, not vectors
};

class AdamW {
 public:
  explicit AdamW(AdamWSettings settings = {});

  // Allocates moment buffers for every model parameter.
  void register_model(Model& model);

  // One update over all registered parameters using their accumulated grads.
  void step(Model& model, float lr);

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t t) { step_count_ = t; }
  const AdamWSettings& settings() const { return settings_; }

  struct Moments {
    std::vector<float> m, v;
  };
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  std::int64_t state_bytes() const;

 private:
  AdamWSettings settings_;
  std::map<std::string, Moments> moments_;
  std::int64_t step_count_ = 0;
};

}  // namespace p2r
