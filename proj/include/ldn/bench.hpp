#pragma once

// Wall-clock timing of the layer forward pass (forward only, no
// optimizer) across sequence lengths, to expose the dense-kernel
// scaling regime.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <thread>
#include <vector>

#include "ldn/layer.hpp"

namespace ldn {

struct BenchRow {
    int t_len = 0;
    double median_ms = 0.0;
    double p10_ms = 0.0;
    double p90_ms = 0.0;
};

namespace detail {

// Nearest-rank percentile over a sorted sample; for 3 repeats p10 is
// the min and p90 the max.
inline double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t idx = static_cast<std::size_t>(std::llround(pos));
    return sorted[std::min(idx, sorted.size() - 1)];
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

// Times `layers` stacked layer_forward calls at each T. With
// parallel > 1, each repeat runs that many independent forwards on
// their own tapes concurrently and reports the wall time of the batch.
inline std::vector<BenchRow> bench_layer_forward(int width, int layers, const std::vector<int>& t_list,
                                                 int repeats, std::uint64_t seed, int parallel = 1) {
    if (width < 1 || layers < 1) throw InputError("bench: width and layers must be positive");
    if (repeats < 3) throw InputError("bench: repeats must be >= 3");
    if (parallel < 1) throw InputError("bench: parallel must be >= 1");
    for (std::size_t i = 1; i < t_list.size(); ++i)
        if (t_list[i] <= t_list[i - 1]) throw InputError("bench: T list must be ascending");

    std::vector<BenchRow> rows;
    for (int t_len : t_list) {
        if (t_len < 1) throw InputError("bench: T must be positive");
        SeededRng rng(seed);
        std::vector<LayerParams> params;
        for (int l = 0; l < layers; ++l)
            params.push_back(init_layer_params(width, 16, MaskMode::Bidirectional, false, rng));
        const Matrix h0 = rand_normal(rng, t_len, width, 1.0);
        const Matrix emb = rand_normal(rng, t_len, width, 1.0);

        const auto one_forward = [&]() {
            Tape tape;
            Var h = tape.leaf(h0);
            Var e = tape.leaf(emb);
            for (int l = 0; l < layers; ++l) {
                LayerVars vars = bind_layer_params(tape, params[l]);
                h = layer_forward(tape, h, e, vars, false).h;
            }
            return tape.value(h)(0, 0); // keep the result observable
        };

        one_forward(); // warmup
        std::vector<double> samples;
        samples.reserve(repeats);
        for (int r = 0; r < repeats; ++r) {
            const auto start = std::chrono::steady_clock::now();
            if (parallel == 1) {
                one_forward();
            } else {
                std::vector<std::thread> workers;
                workers.reserve(parallel);
                for (int w = 0; w < parallel; ++w) workers.emplace_back(one_forward);
                for (std::thread& w : workers) w.join();
            }
            const auto stop = std::chrono::steady_clock::now();
            samples.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
        }
        std::vector<double> sorted = samples;
        std::sort(sorted.begin(), sorted.end());
        rows.push_back(BenchRow{t_len, detail::median(samples), detail::percentile(sorted, 0.10),
                                detail::percentile(sorted, 0.90)});
    }
    return rows;
}

} // namespace ldn
