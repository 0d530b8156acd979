// Timing comparison between the serial reference kernels and the OpenMP
// parallel versions; both must agree bit-for-bit (checked here too).
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "spes/kernels.hpp"
#include "spes/tensor.hpp"

using namespace spes;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto dt = std::chrono::steady_clock::now() - t0;
    return std::chrono::duration<double, std::milli>(dt).count() / reps;
}

}  // namespace

int main() {
    std::mt19937_64 rng(42);
    const int64_t m = 256, k = 512, n = 256, reps = 10;
    Tensor a = Tensor::randn({m, k}, rng, 1.0);
    Tensor b = Tensor::randn({k, n}, rng, 1.0);
    Tensor c_serial = Tensor::zeros({m, n});
    Tensor c_omp = Tensor::zeros({m, n});
    Tensor gain = Tensor::full({k}, 1.f);
    Tensor norm_out = Tensor::zeros({m, k});
    Tensor soft_out = Tensor::zeros({m, k});

    double mm_serial = time_ms(
        [&] { kernels::matmul_serial(a.data.data(), b.data.data(), c_serial.data.data(), m, k, n); },
        reps);
    double mm_omp = time_ms(
        [&] { kernels::matmul_omp(a.data.data(), b.data.data(), c_omp.data.data(), m, k, n); },
        reps);
    bool mm_equal = c_serial.data == c_omp.data;

    kernels::set_parallel(false);
    double rn_serial = time_ms(
        [&] { kernels::rmsnorm_forward(a.data.data(), gain.data.data(), norm_out.data.data(), m, k, 1e-5f); },
        reps);
    double sm_serial = time_ms(
        [&] { kernels::softmax_rows(a.data.data(), soft_out.data.data(), m, k); }, reps);
    Tensor norm_ref = norm_out, soft_ref = soft_out;
    kernels::set_parallel(true);
    double rn_omp = time_ms(
        [&] { kernels::rmsnorm_forward(a.data.data(), gain.data.data(), norm_out.data.data(), m, k, 1e-5f); },
        reps);
    double sm_omp = time_ms(
        [&] { kernels::softmax_rows(a.data.data(), soft_out.data.data(), m, k); }, reps);
    bool rn_equal = norm_ref.data == norm_out.data;
    bool sm_equal = soft_ref.data == soft_out.data;

    std::printf("kernel      serial_ms    omp_ms   speedup  bit_identical\n");
    std::printf("matmul      %9.3f %9.3f %9.2fx  %s\n", mm_serial, mm_omp, mm_serial / mm_omp,
                mm_equal ? "yes" : "NO");
    std::printf("rmsnorm     %9.3f %9.3f %9.2fx  %s\n", rn_serial, rn_omp, rn_serial / rn_omp,
                rn_equal ? "yes" : "NO");
    std::printf("softmax     %9.3f %9.3f %9.2fx  %s\n", sm_serial, sm_omp, sm_serial / sm_omp,
                sm_equal ? "yes" : "NO");
    return (mm_equal && rn_equal && sm_equal) ? 0 : 1;
}
