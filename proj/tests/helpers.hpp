#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "pban/autodiff.hpp"
#include "pban/random.hpp"
#include "pban/tensor.hpp"

namespace pban::test {

namespace fs = std::filesystem;

template <typename S = double>
Tensor<S> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.uniform(lo, hi));
    return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) return INFINITY;
    if (a.size() == 0) return 0.0;
    return double((a.vec() - b.vec()).cwiseAbs().maxCoeff());
}

template <typename S>
Var<S> param(Tensor<S> t) {
    return Var<S>::parameter(std::move(t));
}

template <typename S>
Var<S> constant(Tensor<S> t) {
    return Var<S>::constant(std::move(t));
}

// Direct-summation cross-correlation with zero padding.
inline TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD* bias, Index groups) {
    const Index batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const Index cout = w.dim(0), cg = cin / groups, og = cout / groups, e = w.dim(2), pad = (e - 1) / 2;
    TensorD out({batch, cout, h, wd});
    for (Index b = 0; b < batch; ++b)
        for (Index o = 0; o < cout; ++o)
            for (Index y = 0; y < h; ++y)
                for (Index xx = 0; xx < wd; ++xx) {
                    double s = bias ? (*bias)[o] : 0.0;
                    const Index g = o / og;
                    for (Index c = 0; c < cg; ++c)
                        for (Index ky = 0; ky < e; ++ky)
                            for (Index kx = 0; kx < e; ++kx) {
                                const Index iy = y + ky - pad, ix = xx + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                s += w.at({o, c, ky, kx}) * x.at({b, g * cg + c, iy, ix});
                            }
                    out.at({b, o, y, xx}) = s;
                }
    return out;
}

inline fs::path fixture(const std::string& name) { return fs::path(PBAN_FIXTURE_DIR) / name; }

/// Fresh empty directory under the system temp dir.
inline fs::path scratch_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("pban_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

inline std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

/// Runs the command-line tool with `args` (shell syntax) and captures both streams.
inline CliResult run_cli(const std::string& args, const std::string& env = "PBAN_THREADS=1") {
    const fs::path err_file = fs::temp_directory_path() / ("pban_cli_err_" + std::to_string(::getpid()));
    const std::string cmd = env + " " + std::string(PBAN_CLI_PATH) + " " + args + " 2>" + err_file.string();
    CliResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err_file);
    fs::remove(err_file);
    return r;
}

}  // namespace pban::test
