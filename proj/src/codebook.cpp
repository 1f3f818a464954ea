#include "aquakv/codebook.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <tuple>

#include "aquakv/binary_io.hpp"
#include "aquakv/error.hpp"
#include "aquakv/random.hpp"

namespace aquakv {

std::uint32_t Codebook::nearest(std::span<const float> v) const {
    const auto d = static_cast<std::size_t>(dim);
    std::uint32_t best = 0;
    float best_dist = std::numeric_limits<float>::infinity();
    const float* p = points.data();
    if (d == 2) {
        const float x0 = v[0];
        const float x1 = v[1];
        for (int i = 0; i < size; ++i, p += 2) {
            const float a = x0 - p[0];
            const float b = x1 - p[1];
            const float dist = a * a + b * b;
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<std::uint32_t>(i);
            }
        }
        return best;
    }
    for (int i = 0; i < size; ++i, p += d) {
        float dist = 0.0f;
        for (std::size_t k = 0; k < d; ++k) {
            const float a = v[k] - p[k];
            dist += a * a;
        }
        if (dist < best_dist) {
            best_dist = dist;
            best = static_cast<std::uint32_t>(i);
        }
    }
    return best;
}

namespace {

double distance(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        const double t = a[k] - b[k];
        s += t * t;
    }
    return std::sqrt(s);
}

double distance(const float* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        const double t = static_cast<double>(a[k]) - b[k];
        s += t * t;
    }
    return std::sqrt(s);
}

// Exact nearest and second-nearest centres, lowest index on ties.
void full_search(const float* x, const std::vector<double>& centers, std::size_t n, std::size_t d,
                 std::uint32_t& assign, double& upper, double& lower) {
    double best = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const double dist = distance(x, centers.data() + j * d, d);
        if (dist < best) {
            second = best;
            best = dist;
            arg = static_cast<std::uint32_t>(j);
        } else if (dist < second) {
            second = dist;
        }
    }
    assign = arg;
    upper = best;
    lower = second;
}

struct Neighbor {
    double dist;
    std::uint32_t index;
};

// For each centre, the other centres sorted by distance to it.
std::vector<std::vector<Neighbor>> neighbor_lists(const std::vector<double>& centers, std::size_t n,
                                                  std::size_t d) {
    std::vector<std::vector<Neighbor>> lists(n);
    for (std::size_t j = 0; j < n; ++j) {
        auto& l = lists[j];
        l.reserve(n - 1);
        for (std::size_t q = 0; q < n; ++q) {
            if (q != j) {
                l.push_back({distance(centers.data() + j * d, centers.data() + q * d, d),
                             static_cast<std::uint32_t>(q)});
            }
        }
        std::sort(l.begin(), l.end(), [](const Neighbor& a, const Neighbor& b) {
            return std::tie(a.dist, a.index) < std::tie(b.dist, b.index);
        });
    }
    return lists;
}

// Nearest-centre search starting from the current assignment a at exact
// distance da. A centre q with |c_a - c_q| >= 2 da cannot beat c_a, so only
// the nearer part of a's neighbour list is scanned; the first skipped
// neighbour still yields a valid lower bound for the second-nearest distance.
void local_search(const float* x, const std::vector<double>& centers, const std::vector<Neighbor>& neighbors,
                  std::size_t d, std::uint32_t& assign, double da, double& upper, double& lower) {
    std::uint32_t best_idx = assign;
    double best = da;
    double second = std::numeric_limits<double>::infinity();
    const double radius = 2.0 * da;
    for (const auto& nb : neighbors) {
        if (nb.dist >= radius) {
            second = std::min(second, nb.dist - da);
            break;
        }
        const double dist = distance(x, centers.data() + nb.index * d, d);
        if (dist < best || (dist == best && nb.index < best_idx)) {
            second = best;
            best = dist;
            best_idx = nb.index;
        } else if (dist < second) {
            second = dist;
        }
    }
    assign = best_idx;
    upper = best;
    lower = second;
}

void symmetrize(std::vector<double>& centers, std::size_t n, std::size_t d) {
    struct Pair {
        double cost;
        std::uint32_t i, j;
    };
    std::vector<Pair> pairs;
    pairs.reserve(n * (n - 1) / 2);
    std::vector<double> sum(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            for (std::size_t k = 0; k < d; ++k) {
                sum[k] = centers[i * d + k] + centers[j * d + k];
            }
            double c = 0.0;
            for (double v : sum) {
                c += v * v;
            }
            pairs.push_back({c, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        return std::tie(a.cost, a.i, a.j) < std::tie(b.cost, b.i, b.j);
    });
    std::vector<bool> used(n, false);
    for (const auto& p : pairs) {
        if (used[p.i] || used[p.j]) {
            continue;
        }
        used[p.i] = used[p.j] = true;
        for (std::size_t k = 0; k < d; ++k) {
            const double v = 0.5 * (centers[p.i * d + k] - centers[p.j * d + k]);
            centers[p.i * d + k] = v;
            centers[p.j * d + k] = -v;
        }
    }
}

// Seeded k-means++ in negation pairs: every pick c also adds -c, so the
// starting codebook is already closed under negation.
std::vector<double> paired_init(const std::vector<float>& samples, std::size_t count, std::size_t n, std::size_t d,
                                Rng& rng) {
    std::vector<double> centers;
    centers.reserve(n * d);
    std::vector<double> nearest(count, std::numeric_limits<double>::infinity());
    auto add_pair = [&](std::size_t idx) {
        const std::size_t first = centers.size() / d;
        for (int sign : {1, -1}) {
            for (std::size_t k = 0; k < d; ++k) {
                centers.push_back(sign * static_cast<double>(samples[idx * d + k]));
            }
        }
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t j = first; j < first + 2; ++j) {
                const double dist = distance(samples.data() + i * d, centers.data() + j * d, d);
                nearest[i] = std::min(nearest[i], dist * dist);
            }
        }
    };
    add_pair(rng.below(count));
    while (centers.size() < n * d) {
        double total = 0.0;
        for (double v : nearest) {
            total += v;
        }
        double target = rng.uniform() * total;
        std::size_t pick = count - 1;
        for (std::size_t i = 0; i < count; ++i) {
            target -= nearest[i];
            if (target < 0.0) {
                pick = i;
                break;
            }
        }
        add_pair(pick);
    }
    return centers;
}

struct LloydResult {
    int iterations = 0;
    double movement = 0.0;
};

// Hamerly's bound-accelerated Lloyd iteration; assignments are exact.
LloydResult lloyd(const std::vector<float>& samples, std::size_t count, std::vector<double>& centers, std::size_t n,
                  std::size_t d, const LloydOptions& options) {
    std::vector<std::uint32_t> assign(count);
    std::vector<double> upper(count), lower(count);
    for (std::size_t i = 0; i < count; ++i) {
        full_search(samples.data() + i * d, centers, n, d, assign[i], upper[i], lower[i]);
    }

    std::vector<double> sums(n * d);
    std::vector<std::size_t> members(n);
    std::vector<double> moved(n), half_gap(n);
    int iter = 0;
    double max_move = std::numeric_limits<double>::infinity();
    while (iter < options.max_iterations) {
        ++iter;
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(members.begin(), members.end(), 0);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t a = assign[i];
            ++members[a];
            for (std::size_t k = 0; k < d; ++k) {
                sums[a * d + k] += samples[i * d + k];
            }
        }
        max_move = 0.0;
        std::size_t argmax = 0;
        double second_move = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double m = 0.0;
            if (members[j] > 0) {
                std::vector<double> next(d);
                for (std::size_t k = 0; k < d; ++k) {
                    next[k] = sums[j * d + k] / static_cast<double>(members[j]);
                }
                m = distance(next.data(), centers.data() + j * d, d);
                std::copy(next.begin(), next.end(), centers.begin() + static_cast<std::ptrdiff_t>(j * d));
            }
            moved[j] = m;
            if (m > max_move) {
                second_move = max_move;
                max_move = m;
                argmax = j;
            } else if (m > second_move) {
                second_move = m;
            }
        }
        if (max_move < options.tolerance) {
            break;
        }
        const auto neighbors = neighbor_lists(centers, n, d);
        for (std::size_t j = 0; j < n; ++j) {
            half_gap[j] = 0.5 * neighbors[j].front().dist;
        }
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t a = assign[i];
            upper[i] += moved[a];
            lower[i] -= (a == argmax) ? second_move : max_move;
            const double bound = std::max(half_gap[a], lower[i]);
            if (upper[i] <= bound) {
                continue;
            }
            const float* x = samples.data() + i * d;
            upper[i] = distance(x, centers.data() + a * d, d);
            if (upper[i] <= bound) {
                continue;
            }
            local_search(x, centers, neighbors[a], d, assign[i], upper[i], upper[i], lower[i]);
        }
    }
    return {iter, max_move};
}

double distortion(const std::vector<float>& samples, std::size_t count, const std::vector<double>& centers,
                  std::size_t n, std::size_t d) {
    double total = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t a = 0;
        double up = 0.0, lo = 0.0;
        full_search(samples.data() + i * d, centers, n, d, a, up, lo);
        total += up * up;
    }
    return total / static_cast<double>(count * d);
}

}  // namespace

Codebook build_gaussian_codebook(int dim, int size, std::uint64_t seed, const LloydOptions& options) {
    require(dim >= 1 && dim <= 8, ErrorKind::config, "codebook dimension must be in [1, 8]");
    require(size >= 2, ErrorKind::config, "codebook needs at least 2 codewords");
    require(std::has_single_bit(static_cast<unsigned>(size)), ErrorKind::config,
            "codebook size must be a power of two");
    require(options.restarts >= 1, ErrorKind::config, "Lloyd needs at least one restart");
    const auto d = static_cast<std::size_t>(dim);
    const auto n = static_cast<std::size_t>(size);
    const std::size_t half = options.samples / 2;
    require(half >= n, ErrorKind::config, "fewer Lloyd samples than codewords");

    // Samples come in +x / -x pairs so the empirical distribution is exactly
    // symmetric and Lloyd preserves a negation-closed codebook.
    Rng rng(seed);
    const std::size_t count = 2 * half;
    std::vector<float> samples(count * d);
    for (std::size_t i = 0; i < half; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            const auto v = static_cast<float>(rng.normal());
            samples[2 * i * d + k] = v;
            samples[(2 * i + 1) * d + k] = -v;
        }
    }

    Codebook cb;
    cb.dim = dim;
    cb.size = size;
    cb.seed = seed;
    // Restarts are screened on a prefix of the samples; only the winner is
    // refined on the full set.
    const std::size_t screen = std::min(count, std::max<std::size_t>(std::size_t{1} << 16, 64 * n));
    LloydOptions screening = options;
    screening.max_iterations = std::min(options.max_iterations, 50);
    std::vector<double> best_centers;
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < options.restarts; ++r) {
        std::vector<double> centers = paired_init(samples, screen, n, d, rng);
        if (options.restarts > 1) {
            lloyd(samples, screen, centers, n, d, screening);
        }
        const double mse = options.restarts > 1 ? distortion(samples, screen, centers, n, d) : 0.0;
        if (mse < best) {
            best = mse;
            best_centers = centers;
        }
    }
    const LloydResult run = lloyd(samples, count, best_centers, n, d, options);
    symmetrize(best_centers, n, d);
    cb.lloyd_iterations = run.iterations;
    cb.final_movement = run.movement;
    cb.points.resize(n * d);
    for (std::size_t i = 0; i < n * d; ++i) {
        cb.points[i] = static_cast<float>(best_centers[i]);
    }
    return cb;
}

namespace {

constexpr char kCacheMagic[4] = {'A', 'Q', 'C', 'B'};
constexpr std::uint16_t kCacheVersion = 2;

std::string cache_path(const std::string& dir, int dim, int size, std::uint64_t seed) {
    char name[96];
    std::snprintf(name, sizeof name, "gaussian-d%d-n%d-%016llx-v%u.cbk", dim, size,
                  static_cast<unsigned long long>(seed), static_cast<unsigned>(kCacheVersion));
    return (std::filesystem::path(dir) / name).string();
}

// A missing or unreadable cache entry is not an error; the codebook is rebuilt.
std::shared_ptr<const Codebook> load_cached(const std::string& path, int dim, int size, std::uint64_t seed) {
    try {
        if (!std::filesystem::exists(path)) {
            return nullptr;
        }
        const auto file = read_file(path);
        ByteReader in(verify_checksum(file, path), path);
        if (in.text(4) != std::string(kCacheMagic, 4) || in.u16() != kCacheVersion) {
            return nullptr;
        }
        Codebook cb;
        cb.dim = static_cast<int>(in.u32());
        cb.size = static_cast<int>(in.u32());
        cb.seed = in.u64();
        cb.lloyd_iterations = static_cast<int>(in.u32());
        cb.final_movement = in.f64();
        if (cb.dim != dim || cb.size != size || cb.seed != seed) {
            return nullptr;
        }
        cb.points.resize(static_cast<std::size_t>(dim) * static_cast<std::size_t>(size));
        in.f32s(cb.points);
        return std::make_shared<const Codebook>(std::move(cb));
    } catch (const Error&) {
        return nullptr;
    }
}

void store_cached(const std::string& path, const Codebook& cb) {
    ByteWriter w;
    w.text(std::string_view(kCacheMagic, 4));
    w.u16(kCacheVersion);
    w.u32(static_cast<std::uint32_t>(cb.dim));
    w.u32(static_cast<std::uint32_t>(cb.size));
    w.u64(cb.seed);
    w.u32(static_cast<std::uint32_t>(cb.lloyd_iterations));
    w.f64(cb.final_movement);
    w.f32s(cb.points);
    append_checksum(w);
    try {
        std::filesystem::create_directories(std::filesystem::path(path).parent_path());
        const std::string tmp = path + ".tmp" + std::to_string(std::random_device{}());
        write_file(tmp, w.bytes());
        std::filesystem::rename(tmp, path);
    } catch (const std::exception&) {
        // caching is best effort
    }
}

}  // namespace

std::shared_ptr<const Codebook> gaussian_codebook(int dim, int size, std::uint64_t seed) {
    static std::mutex mutex;
    static std::map<std::tuple<int, int, std::uint64_t>, std::shared_ptr<const Codebook>> memo;
    std::lock_guard lock(mutex);
    auto key = std::make_tuple(dim, size, seed);
    auto it = memo.find(key);
    if (it != memo.end()) {
        return it->second;
    }
    std::shared_ptr<const Codebook> cb;
    const char* dir = std::getenv("AQUAKV_CODEBOOK_DIR");
    const std::string path = dir && *dir ? cache_path(dir, dim, size, seed) : std::string{};
    if (!path.empty()) {
        cb = load_cached(path, dim, size, seed);
    }
    if (!cb) {
        cb = std::make_shared<const Codebook>(build_gaussian_codebook(dim, size, seed));
        if (!path.empty()) {
            store_cached(path, *cb);
        }
    }
    memo.emplace(key, cb);
    return cb;
}

}  // namespace aquakv
