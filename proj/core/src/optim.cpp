#include "p2r/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace p2r {

LrSchedule LrSchedule::cosine(float peak, double warmup_ratio, std::int64_t total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("lr schedule: total_steps must be positive");
  LrSchedule s;
  s.peak = peak;
  s.total_steps = total_steps;
  s.warmup_steps = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(warmup_ratio * static_cast<double>(total_steps))));
  return s;
}

float LrSchedule::at(std::int64_t step) const {
  if (step < warmup_steps)
    return peak * static_cast<float>(step) / static_cast<float>(warmup_steps);
  const double span = static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup_steps));
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return static_cast<float>(peak * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846)));
}

AdamW::AdamW(AdamWSettings settings) : settings_(settings) {}

void AdamW::register_model(Model& model) {
  model.for_each_param([this](const std::string& name, Tensor& t) {
    auto [it, inserted] = moments_.try_emplace(name);
    if (inserted) {
      it->second.m.assign(t.numel(), 0.0f);
      it->second.v.assign(t.numel(), 0.0f);
    } else if (it->second.m.size() != t.numel()) {
      throw std::invalid_argument("adamw: registered size changed for " + name);
    }
    t.ensure_grad();
  });
}

void AdamW::step(Model& model, float lr) {
  ++step_count_;
  const float b1 = settings_.beta1, b2 = settings_.beta2;
  const float bc1 = 1.0f - std::pow(b1, static_cast<float>(step_count_));
  const float bc2 = 1.0f - std::pow(b2, static_cast<float>(step_count_));
  model.for_each_param([&](const std::string& name, Tensor& t) {
    auto it = moments_.find(name);
    if (it == moments_.end()) throw std::logic_error("adamw: unregistered parameter " + name);
    Moments& mm = it->second;
    const bool decay = t.ndim() >= 2;  // skip biases, gains, norms
    float* p = t.data();
    const float* g = t.grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      mm.m[i] = b1 * mm.m[i] + (1.0f - b1) * g[i];
      mm.v[i] = b2 * mm.v[i] + (1.0f - b2) * g[i] * g[i];
      const float mhat = mm.m[i] / bc1;
      const float vhat = mm.v[i] / bc2;
      float update = mhat / (std::sqrt(vhat) + settings_.eps);
      if (decay) update += settings_.weight_decay * p[i];
      p[i] -= lr * update;
    }
  });
}

std::int64_t AdamW::state_bytes() const {
  std::int64_t total = 0;
  for (const auto& [name, mm] : moments_)
    total += static_cast<std::int64_t>((mm.m.size() + mm.v.size()) * sizeof(float));
  return total;
}

}  // namespace p2r
