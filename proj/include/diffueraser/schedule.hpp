#ifndef DIFFUERASER_SCHEDULE_HPP
#define DIFFUERASER_SCHEDULE_HPP

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace diffueraser {

// Linear-beta diffusion schedule plus the inference timestep grid.
// Timesteps use uniform stride over [0,T), largest first; the sampling loop
// ends at timestep 0 and inversion starts there, so the two directions walk
// the same grid.
struct NoiseSchedule {
    int total_timesteps = 0;                // T
    std::vector<double> betas;              // [T], in (0,1)
    std::vector<double> alpha_bar;          // cumulative products, strictly decreasing
    std::vector<int> inference_timesteps;   // strictly decreasing

    static NoiseSchedule linear(int T, double beta_start, double beta_end, int steps) {
        if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
        if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
            throw std::invalid_argument("schedule: betas must satisfy 0 < start <= end < 1");
        NoiseSchedule s;
        s.total_timesteps = T;
        s.betas.resize(static_cast<size_t>(T));
        s.alpha_bar.resize(static_cast<size_t>(T));
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            double b = (T == 1) ? beta_start
                                : beta_start + (beta_end - beta_start) * t / double(T - 1);
            s.betas[static_cast<size_t>(t)] = b;
            prod *= 1.0 - b;
            s.alpha_bar[static_cast<size_t>(t)] = prod;
        }
        s.set_inference_steps(steps);
        return s;
    }

    // Interior grid at uniform stride T/(steps+1): the top level keeps a
    // margin below T-1 so few-step sampling never has to extract a clean
    // estimate at the degenerate end of the schedule, and the bottom step
    // lands a uniform gap above the clean state at timestep 0.
    void set_inference_steps(int steps) {
        if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
        if (steps > total_timesteps - 1)
            throw std::invalid_argument("schedule: steps exceed train timesteps");
        int stride = total_timesteps / (steps + 1);
        if (stride < 1) stride = 1;
        inference_timesteps.clear();
        for (int i = steps - 1; i >= 0; --i)
            inference_timesteps.push_back((i + 1) * stride);
    }

    int n_steps() const { return static_cast<int>(inference_timesteps.size()); }
    int t_max() const { return inference_timesteps.front(); }

    // alpha_bar with the fully-denoised extension at t = -1
    double abar(int t) const {
        if (t == -1) return 1.0;
        if (t < 0 || t >= total_timesteps)
            throw std::out_of_range("schedule: timestep " + std::to_string(t) + " out of range");
        return alpha_bar[static_cast<size_t>(t)];
    }
};

// x_t = sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps
inline Tensor add_noise(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& s) {
    check_same_shape(x0, eps, "add_noise");
    double a = s.abar(t);
    if (t < 0) throw std::out_of_range("add_noise: t out of range");
    double sa = std::sqrt(a), sb = std::sqrt(1.0 - a);
    Tensor out = x0;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = sa * x0[i] + sb * eps[i];
    return out;
}

namespace detail {
// shared DDIM move between two noise levels, either direction
inline Tensor ddim_update(const Tensor& x, const Tensor& eps, double abar_from, double abar_to) {
    check_same_shape(x, eps, "ddim_update");
    double sf = std::sqrt(abar_from), bf = std::sqrt(1.0 - abar_from);
    double st = std::sqrt(abar_to), bt = std::sqrt(1.0 - abar_to);
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x0_hat = (x[i] - bf * eps[i]) / sf;
        out[i] = st * x0_hat + bt * eps[i];
    }
    return out;
}
}  // namespace detail

// deterministic (eta=0) DDIM step from t down to t_prev; t_prev = -1 denoises fully
inline Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev,
                        const NoiseSchedule& s) {
    if (t_prev < -1 || t <= t_prev)
        throw std::invalid_argument("ddim_step: need t > t_prev >= -1, got t=" +
                                    std::to_string(t) + " t_prev=" + std::to_string(t_prev));
    return detail::ddim_update(x_t, eps_pred, s.abar(t), s.abar(t_prev));
}

using EpsModel = std::function<Tensor(const Tensor& x, int t)>;

namespace detail {
// ascending grid {0} U inference timesteps for `steps`
inline std::vector<int> inversion_grid(const NoiseSchedule& s, int steps) {
    NoiseSchedule tmp = s;
    tmp.set_inference_steps(steps);
    std::vector<int> grid(tmp.inference_timesteps.rbegin(), tmp.inference_timesteps.rend());
    if (grid.front() != 0) grid.insert(grid.begin(), 0);
    return grid;
}
}  // namespace detail

// Runs the DDIM recurrence in increasing-t order with the model evaluated at
// the current (lower) timestep. Input is taken at timestep 0; output lives at
// the largest inference timestep. `trajectory`, when given, records the state
// at every inference timestep of the grid (keyed by timestep).
inline Tensor ddim_invert(const Tensor& x0, const EpsModel& model, const NoiseSchedule& s,
                          int steps, std::map<int, Tensor>* trajectory = nullptr) {
    if (steps < 1) throw std::invalid_argument("ddim_invert: steps must be >= 1");
    std::vector<int> grid = detail::inversion_grid(s, steps);
    Tensor x = x0;
    if (trajectory) (*trajectory)[grid.front()] = x;
    for (size_t j = 0; j + 1 < grid.size(); ++j) {
        Tensor eps = model(x, grid[j]);
        check_same_shape(x, eps, "ddim_invert: model output");
        x = detail::ddim_update(x, eps, s.abar(grid[j]), s.abar(grid[j + 1]));
        if (trajectory) (*trajectory)[grid[j + 1]] = x;
    }
    return x;
}

// Mirror of ddim_invert: walks the same grid downward, model evaluated at the
// current (upper) timestep, final state at timestep 0.
inline Tensor ddim_sample(const Tensor& x_top, const EpsModel& model, const NoiseSchedule& s,
                          int steps) {
    if (steps < 1) throw std::invalid_argument("ddim_sample: steps must be >= 1");
    std::vector<int> grid = detail::inversion_grid(s, steps);
    Tensor x = x_top;
    for (size_t j = grid.size(); j-- > 1;) {
        Tensor eps = model(x, grid[j]);
        check_same_shape(x, eps, "ddim_sample: model output");
        x = detail::ddim_update(x, eps, s.abar(grid[j]), s.abar(grid[j - 1]));
    }
    return x;
}

}  // namespace diffueraser

#endif
