#ifndef DIFFUERASER_TEST_HELPERS_HPP
#define DIFFUERASER_TEST_HELPERS_HPP

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "diffueraser/autodiff.hpp"
#include "diffueraser/rng.hpp"
#include "diffueraser/tensor.hpp"

namespace testutil {

using diffueraser::Param;
using diffueraser::Tensor;

// Central finite differences against already-computed analytic grads.
// Returns the worst relative error across all elements of all params.
template <typename EvalFn>
double fd_max_rel_err(const std::vector<Param*>& params, EvalFn eval, double h = 1e-5) {
    double max_err = 0.0;
    for (Param* p : params) {
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            double orig = p->value[i];
            p->value[i] = orig + h;
            double lp = eval();
            p->value[i] = orig - h;
            double lm = eval();
            p->value[i] = orig;
            double fd = (lp - lm) / (2.0 * h);
            double an = p->grad.same_shape(p->value) ? p->grad[i] : 0.0;
            double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            max_err = std::max(max_err, std::abs(fd - an) / denom);
        }
    }
    return max_err;
}

struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }

  private:
    static int& counter() {
        static int c = 0;
        return c;
    }
};

inline double spearman_rho(std::vector<double> a, std::vector<double> b) {
    auto ranks = [](std::vector<double> v) {
        std::vector<size_t> order(v.size());
        for (size_t i = 0; i < v.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (size_t i = 0; i < order.size(); ++i) r[order[i]] = static_cast<double>(i);
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace testutil

#endif
