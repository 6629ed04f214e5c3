#pragma once

// Brute-force reference implementations written against nested std::vector layouts
// and long double arithmetic, sharing no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

// t[head][y][x][c]
using Tensor4 = std::vector<std::vector<std::vector<std::vector<double>>>>;
using Grid = std::vector<std::vector<double>>;

inline Tensor4 make_tensor(int heads, int h, int w, int c) {
    return Tensor4(static_cast<std::size_t>(heads),
                   std::vector(static_cast<std::size_t>(h),
                               std::vector(static_cast<std::size_t>(w), std::vector<double>(static_cast<std::size_t>(c)))));
}

inline Tensor4 random_tensor(std::mt19937_64& gen, int heads, int h, int w, int c, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Tensor4 t = make_tensor(heads, h, w, c);
    for (auto& a : t) {
        for (auto& b : a) {
            for (auto& d : b) {
                for (auto& v : d) {
                    v = static_cast<float>(normal(gen));
                }
            }
        }
    }
    return t;
}

inline Tensor4 fuse(const Tensor4& a, const Tensor4& b, double gamma, double delta) {
    Tensor4 out = a;
    for (std::size_t h = 0; h < a.size(); ++h) {
        for (std::size_t y = 0; y < a[h].size(); ++y) {
            for (std::size_t x = 0; x < a[h][y].size(); ++x) {
                for (std::size_t c = 0; c < a[h][y][x].size(); ++c) {
                    out[h][y][x][c] = gamma * a[h][y][x][c] + delta * b[h][y][x][c];
                }
            }
        }
    }
    return out;
}

inline std::vector<double> contrast_row(const std::vector<double>& row, double beta) {
    long double mean = 0;
    for (double v : row) {
        mean += v;
    }
    mean /= static_cast<long double>(row.size());
    std::vector<long double> adj;
    long double total = 0;
    for (double v : row) {
        long double a = beta * (v - mean) + mean;
        if (a < 0) {
            a = 0;
        }
        adj.push_back(a);
        total += a;
    }
    if (total == 0) {
        return row;
    }
    std::vector<double> out;
    for (long double a : adj) {
        out.push_back(static_cast<double>(a / total));
    }
    return out;
}

// Flatten tokens row-major (y, x) for one head.
inline std::vector<std::vector<double>> tokens(const Tensor4& t, std::size_t head) {
    std::vector<std::vector<double>> out;
    for (const auto& row : t[head]) {
        for (const auto& cell : row) {
            out.push_back(cell);
        }
    }
    return out;
}

inline Tensor4 styled_attention(const Tensor4& q, const Tensor4& k, const Tensor4& v, double beta) {
    const std::size_t heads = q.size();
    const int h = static_cast<int>(q[0].size());
    const int w = static_cast<int>(q[0][0].size());
    const int dv = static_cast<int>(v[0][0][0].size());
    Tensor4 out = make_tensor(static_cast<int>(heads), h, w, dv);
    for (std::size_t head = 0; head < heads; ++head) {
        const auto qt = tokens(q, head);
        const auto kt = tokens(k, head);
        const auto vt = tokens(v, head);
        const long double scale = 1.0L / std::sqrt(static_cast<long double>(qt[0].size()));
        for (std::size_t i = 0; i < qt.size(); ++i) {
            std::vector<long double> logits;
            for (const auto& key : kt) {
                long double dot = 0;
                for (std::size_t c = 0; c < key.size(); ++c) {
                    dot += static_cast<long double>(qt[i][c]) * key[c];
                }
                logits.push_back(dot * scale);
            }
            const long double peak = *std::max_element(logits.begin(), logits.end());
            long double z = 0;
            for (auto& l : logits) {
                l = std::exp(l - peak);
                z += l;
            }
            std::vector<double> row;
            for (auto l : logits) {
                row.push_back(static_cast<double>(l / z));
            }
            row = contrast_row(row, beta);
            for (int c = 0; c < dv; ++c) {
                long double acc = 0;
                for (std::size_t j = 0; j < vt.size(); ++j) {
                    acc += row[j] * static_cast<long double>(vt[j][static_cast<std::size_t>(c)]);
                }
                out[head][i / static_cast<std::size_t>(w)][i % static_cast<std::size_t>(w)][static_cast<std::size_t>(c)] =
                    static_cast<double>(acc);
            }
        }
    }
    return out;
}

// channels x values
inline std::vector<std::vector<double>> adain(const std::vector<std::vector<double>>& content,
                                              const std::vector<std::vector<double>>& style) {
    auto moments = [](const std::vector<double>& v) {
        long double m = 0;
        for (double x : v) {
            m += x;
        }
        m /= static_cast<long double>(v.size());
        long double s = 0;
        for (double x : v) {
            s += (x - m) * (x - m);
        }
        return std::pair<long double, long double>{m, std::sqrt(s / static_cast<long double>(v.size()))};
    };
    std::vector<std::vector<double>> out;
    for (std::size_t c = 0; c < content.size(); ++c) {
        const auto [mc, sc] = moments(content[c]);
        const auto [ms, ss] = moments(style[c]);
        std::vector<double> ch;
        for (double x : content[c]) {
            ch.push_back(sc == 0 ? static_cast<double>(ms) : static_cast<double>((x - mc) / sc * ss + ms));
        }
        out.push_back(ch);
    }
    return out;
}

inline Grid similarity(const Tensor4& a, const Tensor4& b) {
    const std::size_t heads = a.size();
    Grid out(a[0].size(), std::vector<double>(a[0][0].size(), 0.0));
    for (std::size_t y = 0; y < out.size(); ++y) {
        for (std::size_t x = 0; x < out[y].size(); ++x) {
            long double sum = 0;
            for (std::size_t h = 0; h < heads; ++h) {
                long double dot = 0;
                long double na = 0;
                long double nb = 0;
                for (std::size_t c = 0; c < a[h][y][x].size(); ++c) {
                    dot += static_cast<long double>(a[h][y][x][c]) * b[h][y][x][c];
                    na += static_cast<long double>(a[h][y][x][c]) * a[h][y][x][c];
                    nb += static_cast<long double>(b[h][y][x][c]) * b[h][y][x][c];
                }
                if (na > 0 && nb > 0) {
                    sum += std::clamp(dot / std::sqrt(na * nb), -1.0L, 1.0L);
                }
            }
            out[y][x] = static_cast<double>(sum / static_cast<long double>(heads));
        }
    }
    return out;
}

// Rank-based: sorts, interpolates linearly between order statistics at q*(n-1).
inline Grid dissimilarity(const Grid& sim, double q) {
    std::vector<double> all;
    for (const auto& row : sim) {
        all.insert(all.end(), row.begin(), row.end());
    }
    std::vector<double> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    const long double pos = static_cast<long double>(q) * static_cast<long double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const long double threshold = sorted[lo] + (pos - lo) * (static_cast<long double>(sorted[hi]) - sorted[lo]);
    Grid out = sim;
    for (auto& row : out) {
        for (auto& v : row) {
            v = v < threshold ? 1.0 : 0.0;
        }
    }
    return out;
}

// Per-pixel case analysis of the three-step composition.
inline Tensor4 compose(const Tensor4& q1, const Tensor4& q2, const Grid& m_dis, const Grid& m1, const Grid& m2) {
    Tensor4 out = q1;
    for (std::size_t h = 0; h < q1.size(); ++h) {
        for (std::size_t y = 0; y < q1[h].size(); ++y) {
            for (std::size_t x = 0; x < q1[h][y].size(); ++x) {
                const Tensor4* src = &q1;
                if (m2[y][x] == 1.0) {
                    src = &q2;
                } else if (m1[y][x] == 1.0) {
                    src = &q1;
                } else if (m_dis[y][x] == 1.0) {
                    src = &q2;
                }
                out[h][y][x] = (*src)[h][y][x];
            }
        }
    }
    return out;
}

} // namespace oracle
