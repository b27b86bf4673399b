#pragma once

// In-repo environments: CartPole, MountainCar, Acrobot (classic-control
// dynamics with the usual Gym constants) and TextGrid, a 7x7 grid where the
// agent follows a templated instruction naming the target cell.
//
// The interface is functional: reset() builds an EnvState, step() advances it
// in place and returns the transition.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "bitrl/env_id.hpp"
#include "bitrl/error.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

struct EnvState {
  EnvId env = EnvId::cartpole;
  DenseVector obs;
  DenseVector internal;  // simulator state; equals obs except for Acrobot
  std::size_t step_index = 0;
  bool done = false;
  std::string instruction;  // TextGrid only
};

struct StepResult {
  DenseVector next_obs;
  double reward = 0.0;
  bool done = false;       // reached a terminal state
  bool truncated = false;  // hit the step cap
};

inline std::size_t step_cap(EnvId id) {
  switch (id) {
    case EnvId::cartpole: return 500;
    case EnvId::mountaincar: return 200;
    case EnvId::acrobot: return 500;
    case EnvId::textgrid: return 100;
  }
  return 0;
}

namespace cartpole {
inline constexpr double kGravity = 9.8;
inline constexpr double kCartMass = 1.0;
inline constexpr double kPoleMass = 0.1;
inline constexpr double kTotalMass = kCartMass + kPoleMass;
inline constexpr double kHalfLength = 0.5;
inline constexpr double kPoleMassLength = kPoleMass * kHalfLength;
inline constexpr double kForce = 10.0;
inline constexpr double kTau = 0.02;
inline constexpr double kAngleLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;
inline constexpr double kPositionLimit = 2.4;

// One explicit Euler step; s = [x, x_dot, theta, theta_dot].
inline std::array<double, 4> euler_step(const std::array<double, 4>& s, std::size_t action) {
  const double force = action == 1 ? kForce : -kForce;
  const double cos_t = std::cos(s[2]);
  const double sin_t = std::sin(s[2]);
  const double temp = (force + kPoleMassLength * s[3] * s[3] * sin_t) / kTotalMass;
  const double theta_acc =
      (kGravity * sin_t - cos_t * temp) / (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_t * cos_t / kTotalMass));
  const double x_acc = temp - kPoleMassLength * theta_acc * cos_t / kTotalMass;
  return {s[0] + kTau * s[1], s[1] + kTau * x_acc, s[2] + kTau * s[3], s[3] + kTau * theta_acc};
}
}  // namespace cartpole

namespace mountaincar {
inline constexpr double kMinPosition = -1.2;
inline constexpr double kMaxPosition = 0.6;
inline constexpr double kMaxSpeed = 0.07;
inline constexpr double kGoalPosition = 0.5;
inline constexpr double kForce = 0.001;
inline constexpr double kGravity = 0.0025;
}  // namespace mountaincar

namespace acrobot {
inline constexpr double kDt = 0.2;
inline constexpr double kLink1 = 1.0;
inline constexpr double kMass1 = 1.0;
inline constexpr double kMass2 = 1.0;
inline constexpr double kCom1 = 0.5;
inline constexpr double kCom2 = 0.5;
inline constexpr double kMoi = 1.0;
inline constexpr double kGravity = 9.8;
inline constexpr double kMaxVel1 = 4.0 * std::numbers::pi;
inline constexpr double kMaxVel2 = 9.0 * std::numbers::pi;

using State = std::array<double, 4>;  // theta1, theta2, dtheta1, dtheta2

// Equations of motion ("book" variant), returns d/dt of the state.
inline State derivatives(const State& s, double torque) {
  const double m1 = kMass1, m2 = kMass2, l1 = kLink1, lc1 = kCom1, lc2 = kCom2, i1 = kMoi, i2 = kMoi;
  const double g = kGravity;
  const double t1 = s[0], t2 = s[1], dt1 = s[2], dt2 = s[3];
  const double d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(t2)) + i1 + i2;
  const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(t2)) + i2;
  const double phi2 = m2 * lc2 * g * std::cos(t1 + t2 - std::numbers::pi / 2.0);
  const double phi1 = -m2 * l1 * lc2 * dt2 * dt2 * std::sin(t2) - 2.0 * m2 * l1 * lc2 * dt2 * dt1 * std::sin(t2) +
                      (m1 * lc1 + m2 * l1) * g * std::cos(t1 - std::numbers::pi / 2.0) + phi2;
  const double ddt2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dt1 * dt1 * std::sin(t2) - phi2) /
                      (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
  const double ddt1 = -(d2 * ddt2 + phi1) / d1;
  return {dt1, dt2, ddt1, ddt2};
}

// One classical Runge-Kutta step of length dt with constant torque.
inline State rk4(const State& s, double torque, double dt) {
  auto axpy = [](const State& a, const State& b, double h) {
    return State{a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2], a[3] + h * b[3]};
  };
  const State k1 = derivatives(s, torque);
  const State k2 = derivatives(axpy(s, k1, dt / 2.0), torque);
  const State k3 = derivatives(axpy(s, k2, dt / 2.0), torque);
  const State k4 = derivatives(axpy(s, k3, dt), torque);
  State out;
  for (int i = 0; i < 4; ++i) out[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

// Kinetic plus potential energy of the unforced system.
inline double energy(const State& s) {
  const double m1 = kMass1, m2 = kMass2, l1 = kLink1, lc1 = kCom1, lc2 = kCom2, i1 = kMoi, i2 = kMoi;
  const double d11 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(s[1])) + i1 + i2;
  const double d12 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(s[1])) + i2;
  const double d22 = m2 * lc2 * lc2 + i2;
  const double kinetic = 0.5 * (d11 * s[2] * s[2] + 2.0 * d12 * s[2] * s[3] + d22 * s[3] * s[3]);
  const double potential = -(m1 * lc1 + m2 * l1) * kGravity * std::cos(s[0]) - m2 * lc2 * kGravity * std::cos(s[0] + s[1]);
  return kinetic + potential;
}

inline double wrap_angle(double x) {
  const double two_pi = 2.0 * std::numbers::pi;
  while (x > std::numbers::pi) x -= two_pi;
  while (x < -std::numbers::pi) x += two_pi;
  return x;
}

inline DenseVector observe(const DenseVector& s) {
  return {std::cos(s[0]), std::sin(s[0]), std::cos(s[1]), std::sin(s[1]), s[2], s[3]};
}
}  // namespace acrobot

namespace textgrid {
inline constexpr int kSize = 7;
inline constexpr double kGoalReward = 1.0;
inline constexpr double kStepCost = 0.01;
inline constexpr int kStartRow = 0;
inline constexpr int kStartCol = 0;

inline std::string instruction(int row, int col) {
  return "go to the red cell at row " + std::to_string(row) + " column " + std::to_string(col);
}
}  // namespace textgrid

inline EnvState reset(EnvId id, RngStream& rng) {
  EnvState st;
  st.env = id;
  switch (id) {
    case EnvId::cartpole:
      st.internal = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                     rng.uniform(-0.05, 0.05)};
      st.obs = st.internal;
      break;
    case EnvId::mountaincar:
      st.internal = {rng.uniform(-0.6, -0.4), 0.0};
      st.obs = st.internal;
      break;
    case EnvId::acrobot:
      st.internal = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
      st.obs = acrobot::observe(st.internal);
      break;
    case EnvId::textgrid: {
      // Any cell except the start.
      const std::size_t cell = 1 + rng.below(textgrid::kSize * textgrid::kSize - 1);
      const int tr = static_cast<int>(cell) / textgrid::kSize;
      const int tc = static_cast<int>(cell) % textgrid::kSize;
      st.internal = {double(textgrid::kStartRow), double(textgrid::kStartCol), double(tr), double(tc)};
      st.obs = st.internal;
      st.instruction = textgrid::instruction(tr, tc);
      break;
    }
  }
  return st;
}

// Advances state in place. The rng is part of the contract for stochastic
// environments; the bundled dynamics are deterministic after reset.
inline StepResult step(EnvState& st, std::size_t action, RngStream& rng) {
  (void)rng;
  if (st.done) throw Error(ErrorKind::environment, "step called on a finished episode; reset first");
  if (action >= action_count(st.env)) throw Error(ErrorKind::environment, "action out of range");
  StepResult res;
  auto& s = st.internal;
  switch (st.env) {
    case EnvId::cartpole: {
      const auto n = cartpole::euler_step({s[0], s[1], s[2], s[3]}, action);
      s.assign(n.begin(), n.end());
      st.obs = s;
      res.done = s[0] < -cartpole::kPositionLimit || s[0] > cartpole::kPositionLimit ||
                 s[2] < -cartpole::kAngleLimit || s[2] > cartpole::kAngleLimit;
      res.reward = 1.0;
      break;
    }
    case EnvId::mountaincar: {
      namespace mc = mountaincar;
      double pos = s[0], vel = s[1];
      vel += (static_cast<double>(action) - 1.0) * mc::kForce + std::cos(3.0 * pos) * (-mc::kGravity);
      vel = std::clamp(vel, -mc::kMaxSpeed, mc::kMaxSpeed);
      pos += vel;
      pos = std::clamp(pos, mc::kMinPosition, mc::kMaxPosition);
      if (pos == mc::kMinPosition && vel < 0.0) vel = 0.0;
      s = {pos, vel};
      st.obs = s;
      res.done = pos >= mc::kGoalPosition && vel >= 0.0;
      res.reward = -1.0;
      break;
    }
    case EnvId::acrobot: {
      const double torque = static_cast<double>(action) - 1.0;
      auto n = acrobot::rk4({s[0], s[1], s[2], s[3]}, torque, acrobot::kDt);
      n[0] = acrobot::wrap_angle(n[0]);
      n[1] = acrobot::wrap_angle(n[1]);
      n[2] = std::clamp(n[2], -acrobot::kMaxVel1, acrobot::kMaxVel1);
      n[3] = std::clamp(n[3], -acrobot::kMaxVel2, acrobot::kMaxVel2);
      s.assign(n.begin(), n.end());
      st.obs = acrobot::observe(s);
      res.done = -std::cos(n[0]) - std::cos(n[1] + n[0]) > 1.0;
      res.reward = res.done ? 0.0 : -1.0;
      break;
    }
    case EnvId::textgrid: {
      static constexpr int kDr[4] = {-1, 1, 0, 0};  // up, down, left, right
      static constexpr int kDc[4] = {0, 0, -1, 1};
      const int r = std::clamp(static_cast<int>(s[0]) + kDr[action], 0, textgrid::kSize - 1);
      const int c = std::clamp(static_cast<int>(s[1]) + kDc[action], 0, textgrid::kSize - 1);
      s[0] = r;
      s[1] = c;
      st.obs = s;
      res.done = r == static_cast<int>(s[2]) && c == static_cast<int>(s[3]);
      res.reward = -textgrid::kStepCost + (res.done ? textgrid::kGoalReward : 0.0);
      break;
    }
  }
  ++st.step_index;
  res.truncated = !res.done && st.step_index >= step_cap(st.env);
  st.done = res.done || res.truncated;
  res.next_obs = st.obs;
  return res;
}

// Manhattan distance from the agent to the target (moves are 4-connected).
inline std::size_t shortest_path_length(const EnvState& st) {
  if (st.env != EnvId::textgrid) throw Error(ErrorKind::invalid_argument, "shortest path only defined for textgrid");
  return static_cast<std::size_t>(std::abs(st.internal[0] - st.internal[2]) + std::abs(st.internal[1] - st.internal[3]));
}

}  // namespace bitrl
