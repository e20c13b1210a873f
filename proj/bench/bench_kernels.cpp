// Times each dense kernel in its serial and OpenMP form over rising sizes and
// verifies the two stay bit-identical on every input tried here.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "ppm/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using ppm::kernels::thread_cap;

namespace {

using Clock = std::chrono::steady_clock;

std::vector<float> random_vec(size_t n, uint32_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

template <typename F>
double time_best_of(int reps, F&& fn) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        fn();
        best = std::min(best, std::chrono::duration<double>(Clock::now() - t0).count());
    }
    return best;
}

int g_mismatches = 0;

void report(const std::string& name, double flops_or_bytes, const char* unit, double serial_s,
            double parallel_s, bool identical) {
    if (!identical) ++g_mismatches;
    std::printf("%-28s %9.3f ms -> %9.3f ms  x%5.2f  %8.2f %s/s  %s\n", name.c_str(),
                serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s,
                flops_or_bytes / parallel_s / 1e9, unit, identical ? "bit-identical" : "MISMATCH");
}

void bench_bmm(int groups, int m, int k, int n) {
    const auto a = random_vec(static_cast<size_t>(groups) * m * k, 1);   // [g,m,k]
    const auto b = random_vec(static_cast<size_t>(groups) * k * n, 2);   // [g,k,n]
    const auto bt = random_vec(static_cast<size_t>(groups) * n * k, 3);  // [g,n,k]
    const auto b2 = random_vec(static_cast<size_t>(groups) * m * n, 10); // [g,m,n]
    std::vector<float> ys(static_cast<size_t>(groups) * m * n), yp(ys.size());
    std::vector<float> zs(static_cast<size_t>(groups) * k * n), zp(zs.size());

    const double flops = 2.0 * groups * m * k * n;
    const std::string tag = std::to_string(groups) + "x" + std::to_string(m) + "x" +
                            std::to_string(k) + "x" + std::to_string(n);

    double s = time_best_of(3, [&] {
        ppm::kernels::serial::bmm_nn(a.data(), b.data(), ys.data(), groups, m, k, n);
    });
    double p = time_best_of(3, [&] {
        ppm::kernels::bmm_nn(a.data(), b.data(), yp.data(), groups, m, k, n);
    });
    report("bmm_nn " + tag, flops, "GF", s, p, ys == yp);

    s = time_best_of(3, [&] {
        ppm::kernels::serial::bmm_nt(a.data(), bt.data(), ys.data(), groups, m, n, k);
    });
    p = time_best_of(3, [&] {
        ppm::kernels::bmm_nt(a.data(), bt.data(), yp.data(), groups, m, n, k);
    });
    report("bmm_nt " + tag, flops, "GF", s, p, ys == yp);

    s = time_best_of(3, [&] {
        ppm::kernels::serial::bmm_tn(a.data(), b2.data(), zs.data(), groups, k, n, m);
    });
    p = time_best_of(3, [&] {
        ppm::kernels::bmm_tn(a.data(), b2.data(), zp.data(), groups, k, n, m);
    });
    report("bmm_tn " + tag, flops, "GF", s, p, zs == zp);
}

void bench_rows(long long rows, int width) {
    const auto x = random_vec(static_cast<size_t>(rows) * width, 4);
    const auto dy = random_vec(x.size(), 5);
    const auto gain = random_vec(static_cast<size_t>(width), 6);
    const auto bias = random_vec(static_cast<size_t>(width), 7);
    std::vector<float> ys(x.size()), yp(x.size()), ds(x.size()), dp(x.size());
    std::vector<float> ms(static_cast<size_t>(rows)), rs(static_cast<size_t>(rows));
    std::vector<float> mp(static_cast<size_t>(rows)), rp(static_cast<size_t>(rows));

    const std::string tag = std::to_string(rows) + "x" + std::to_string(width);
    const double bytes = 2.0 * static_cast<double>(x.size()) * sizeof(float);

    double s = time_best_of(3, [&] {
        ppm::kernels::serial::softmax_rows(x.data(), ys.data(), rows, width);
    });
    double p = time_best_of(3, [&] {
        ppm::kernels::softmax_rows(x.data(), yp.data(), rows, width);
    });
    report("softmax " + tag, bytes, "GB", s, p, ys == yp);

    s = time_best_of(3, [&] {
        ppm::kernels::serial::softmax_rows_backward(ys.data(), dy.data(), ds.data(), rows, width);
    });
    p = time_best_of(3, [&] {
        ppm::kernels::softmax_rows_backward(ys.data(), dy.data(), dp.data(), rows, width);
    });
    report("softmax_bwd " + tag, bytes, "GB", s, p, ds == dp);

    s = time_best_of(3, [&] {
        ppm::kernels::serial::layer_norm_rows(x.data(), gain.data(), bias.data(), ys.data(),
                                              ms.data(), rs.data(), rows, width, 1e-5f);
    });
    p = time_best_of(3, [&] {
        ppm::kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), yp.data(), mp.data(),
                                      rp.data(), rows, width, 1e-5f);
    });
    report("layer_norm " + tag, bytes, "GB", s, p, ys == yp && ms == mp && rs == rp);
}

void bench_elementwise(long long n) {
    const auto x = random_vec(static_cast<size_t>(n), 8);
    const auto dy = random_vec(static_cast<size_t>(n), 9);
    std::vector<float> ys(x.size()), yp(x.size());
    const std::string tag = std::to_string(n);
    const double bytes = 2.0 * static_cast<double>(n) * sizeof(float);

    double s = time_best_of(3, [&] { ppm::kernels::serial::gelu(x.data(), ys.data(), n); });
    double p = time_best_of(3, [&] { ppm::kernels::gelu(x.data(), yp.data(), n); });
    report("gelu " + tag, bytes, "GB", s, p, ys == yp);

    s = time_best_of(3, [&] {
        ppm::kernels::serial::gelu_backward(x.data(), dy.data(), ys.data(), n);
    });
    p = time_best_of(3, [&] { ppm::kernels::gelu_backward(x.data(), dy.data(), yp.data(), n); });
    report("gelu_bwd " + tag, bytes, "GB", s, p, ys == yp);
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("threads: %d (cap via PPM_THREADS)\n\n", thread_cap());
#else
    std::printf("threads: 1 (built without OpenMP)\n\n");
#endif
    std::printf("%-28s %12s -> %12s %7s %12s\n", "kernel", "serial", "parallel", "speedup",
                "throughput");

    bench_bmm(8, 64, 64, 64);
    bench_bmm(32, 128, 64, 128);
    bench_bmm(64, 256, 64, 256);
    std::printf("\n");
    bench_rows(1 << 12, 64);
    bench_rows(1 << 15, 128);
    std::printf("\n");
    bench_elementwise(1 << 18);
    bench_elementwise(1 << 22);

    if (g_mismatches) {
        std::printf("\n%d kernel(s) diverged from the serial reference\n", g_mismatches);
        return 1;
    }
    std::printf("\nall kernels bit-identical to the serial reference\n");
    return 0;
}
