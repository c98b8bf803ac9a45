#pragma once

// Similarity machinery: pairwise cosine statistics over support features and
// prototypes, the two adaptive coefficients, an exact earth-mover distance
// solver for prototype transport problems, and the batch-statistics profiler
// with Gaussian KDE summaries.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "prolad/errors.hpp"
#include "prolad/nn.hpp"
#include "prolad/tape.hpp"
#include "prolad/tensor.hpp"

namespace prolad::similarity {

// ---- pairwise cosine statistics ----

namespace detail {

inline double cosine(const double* a, const double* b, std::size_t d) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb) + 1e-12);
}

// Mean cosine over all unordered distinct row pairs (no diagonal).
inline double mean_pairwise_cosine(const std::vector<double>& rows, std::size_t n,
                                   std::size_t d) {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      sum += cosine(rows.data() + i * d, rows.data() + j * d, d);
    }
  }
  return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

}  // namespace detail

struct SimilarityStats {
  double mean_feat_sim = 0.0;      // mean cos over n(n-1)/2 support-feature pairs
  double mean_intercls_sim = 0.0;  // mean cos over K(K-1)/2 prototype pairs
  double abs_diff = 0.0;           // |mean_feat_sim - mean_intercls_sim|
  std::size_t feat_pairs = 0;
  std::size_t proto_pairs = 0;
};

// Statistics over support-set embeddings (from the *pretrained* extractor,
// no adapters — the caller supplies the features) and their class prototypes.
inline SimilarityStats similarity_stats(const Tensor& feats, const std::vector<long>& labels,
                                        std::size_t way) {
  if (feats.rank() != 2) {
    throw ShapeError("similarity_stats: features must be [n,d], got " + shape_str(feats.shape()));
  }
  const std::size_t n = feats.size(0), d = feats.size(1);
  if (labels.size() != n) {
    throw InputError("similarity_stats: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  if (n < 2 || way < 2) {
    throw InputError("similarity_stats: need at least 2 samples and 2 classes");
  }
  std::vector<double> protos(way * d, 0.0);
  std::vector<std::size_t> counts(way, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const long l = labels[i];
    if (l < 0 || static_cast<std::size_t>(l) >= way) {
      throw InputError("similarity_stats: label " + std::to_string(l) + " outside [0," +
                       std::to_string(way) + ")");
    }
    counts[static_cast<std::size_t>(l)]++;
    for (std::size_t j = 0; j < d; ++j) {
      protos[static_cast<std::size_t>(l) * d + j] += feats.data()[i * d + j];
    }
  }
  for (std::size_t k = 0; k < way; ++k) {
    if (counts[k] == 0) {
      throw InputError("similarity_stats: class " + std::to_string(k) + " has no samples");
    }
    for (std::size_t j = 0; j < d; ++j) protos[k * d + j] /= static_cast<double>(counts[k]);
  }
  SimilarityStats s;
  s.mean_feat_sim = detail::mean_pairwise_cosine(feats.data(), n, d);
  s.mean_intercls_sim = detail::mean_pairwise_cosine(protos, way, d);
  s.abs_diff = std::abs(s.mean_feat_sim - s.mean_intercls_sim);
  s.feat_pairs = n * (n - 1) / 2;
  s.proto_pairs = way * (way - 1) / 2;
  return s;
}

// ---- adaptive coefficients ----

// lambda = clamp(exp(beta * (abs_diff - 1)), 0, 1). The raw exponential
// exceeds 1 once abs_diff > 1; clamping realizes the intended [0,1] range.
inline double coeff_sim(double abs_diff, double beta) {
  if (beta <= 0.0) throw ConfigError("coeff_sim: beta must be positive");
  return std::clamp(std::exp(beta * (abs_diff - 1.0)), 0.0, 1.0);
}

inline double coeff_sim(const SimilarityStats& stats, double beta) {
  return coeff_sim(stats.abs_diff, beta);
}

// lambda = exp(-beta * L_orig * (1 - acc)).
inline double coeff_loss(double l_orig, double acc, double beta) {
  if (beta <= 0.0) throw ConfigError("coeff_loss: beta must be positive");
  if (l_orig < 0.0) throw InputError("coeff_loss: loss must be nonnegative");
  if (acc < 0.0 || acc > 1.0) throw InputError("coeff_loss: accuracy must lie in [0,1]");
  return std::exp(-beta * l_orig * (1.0 - acc));
}

// ---- support fit of the frozen features (inputs to coeff_loss) ----

struct SupportFit {
  double loss = 0.0;  // mean cross-entropy of the scaled-cosine prototype head
  double acc = 0.0;   // argmax accuracy on the same support set
};

// Deterministic measurement head over fixed features: class-mean prototypes,
// logits = tau * cos(f_i, p_k), no learned alignment, no randomness.
inline SupportFit support_loss_acc(const Tensor& feats, const std::vector<long>& labels,
                                   std::size_t way, double tau = 10.0) {
  if (feats.rank() != 2) {
    throw ShapeError("support_loss_acc: features must be [n,d]");
  }
  const std::size_t n = feats.size(0), d = feats.size(1);
  if (labels.size() != n || n == 0 || way == 0) {
    throw InputError("support_loss_acc: bad labels/way");
  }
  std::vector<double> protos(way * d, 0.0);
  std::vector<std::size_t> counts(way, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const long l = labels[i];
    if (l < 0 || static_cast<std::size_t>(l) >= way) {
      throw InputError("support_loss_acc: label outside [0,way)");
    }
    counts[static_cast<std::size_t>(l)]++;
    for (std::size_t j = 0; j < d; ++j) {
      protos[static_cast<std::size_t>(l) * d + j] += feats.data()[i * d + j];
    }
  }
  for (std::size_t k = 0; k < way; ++k) {
    if (counts[k] == 0) throw InputError("support_loss_acc: class without samples");
    for (std::size_t j = 0; j < d; ++j) protos[k * d + j] /= static_cast<double>(counts[k]);
  }
  SupportFit fit;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(way);
    for (std::size_t k = 0; k < way; ++k) {
      logits[k] = tau * detail::cosine(feats.data().data() + i * d, protos.data() + k * d, d);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double lse = 0.0;
    for (double v : logits) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    fit.loss += lse - logits[static_cast<std::size_t>(labels[i])];
    const std::size_t pred = static_cast<std::size_t>(
        std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (pred == static_cast<std::size_t>(labels[i])) ++correct;
  }
  fit.loss /= static_cast<double>(n);
  fit.acc = static_cast<double>(correct) / static_cast<double>(n);
  return fit;
}

// ---- earth-mover distance ----

struct TransportProblem {
  std::vector<std::vector<double>> cost;  // m x n, nonnegative
  std::vector<double> source_weights;     // sums to 1
  std::vector<double> target_weights;     // sums to 1

  // Uniform-weight problem between two prototype sets (rows), with
  // d_ij = ||p_i - p_j||_2.
  static TransportProblem between(const Tensor& protos_a, const Tensor& protos_b) {
    if (protos_a.rank() != 2 || protos_b.rank() != 2 || protos_a.size(1) != protos_b.size(1)) {
      throw ShapeError("TransportProblem: prototype sets must be [m,d] and [n,d]");
    }
    const std::size_t m = protos_a.size(0), n = protos_b.size(0), d = protos_a.size(1);
    if (m == 0 || n == 0) throw InputError("TransportProblem: empty prototype set");
    TransportProblem p;
    p.cost.assign(m, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = protos_a.data()[i * d + k] - protos_b.data()[j * d + k];
          s += diff * diff;
        }
        p.cost[i][j] = std::sqrt(s);
      }
    }
    p.source_weights.assign(m, 1.0 / static_cast<double>(m));
    p.target_weights.assign(n, 1.0 / static_cast<double>(n));
    return p;
  }
};

struct TransportPlan {
  std::vector<std::vector<double>> flows;  // m x n
  double emd = 0.0;                        // sum f*d / sum f
};

// Exact solver: successive shortest augmenting paths with node potentials
// (Dijkstra over reduced costs). The graph is source -> suppliers ->
// consumers -> sink; supplier->consumer arcs are uncapacitated with cost
// d_ij, the outer arcs carry the weights at cost 0. Dijkstra finalizes each
// node once, so its predecessor tree is acyclic even under floating-point
// ties, and potentials keep all reduced costs nonnegative.
inline TransportPlan solve_emd(const TransportProblem& p) {
  const std::size_t m = p.cost.size();
  if (m == 0 || p.cost[0].empty()) throw InputError("solve_emd: empty prototype set");
  const std::size_t n = p.cost[0].size();
  if (p.source_weights.size() != m || p.target_weights.size() != n) {
    throw InputError("solve_emd: weight counts do not match the cost matrix");
  }
  double sa = 0.0, sb = 0.0;
  for (const auto& row : p.cost) {
    if (row.size() != n) throw InputError("solve_emd: ragged cost matrix");
    for (double c : row) {
      if (c < 0.0) throw InputError("solve_emd: negative cost");
    }
  }
  for (double w : p.source_weights) {
    if (w < 0.0) throw InputError("solve_emd: negative source weight");
    sa += w;
  }
  for (double w : p.target_weights) {
    if (w < 0.0) throw InputError("solve_emd: negative target weight");
    sb += w;
  }
  if (std::abs(sa - 1.0) > 1e-12 || std::abs(sb - 1.0) > 1e-12) {
    throw InputError("solve_emd: unbalanced weights (each side must sum to 1)");
  }

  // Nodes: 0 = source, 1..m = suppliers, m+1..m+n = consumers, m+n+1 = sink.
  constexpr double kTol = 1e-14;
  const double kInf = std::numeric_limits<double>::infinity();
  const std::size_t vcount = m + n + 2;
  const std::size_t src = 0, snk = m + n + 1;
  auto sup = [&](std::size_t i) { return 1 + i; };
  auto con = [&](std::size_t j) { return 1 + m + j; };

  std::vector<double> fa(m, 0.0), fb(n, 0.0);  // flow on source->i and j->sink
  std::vector<std::vector<double>> f(m, std::vector<double>(n, 0.0));
  std::vector<double> pot(vcount, 0.0);
  std::vector<double> dist(vcount);
  std::vector<int> prev(vcount);
  std::vector<char> done(vcount);

  // Reduced cost of an arc u->v with raw cost c; potentials keep this
  // nonnegative up to roundoff, which the clamp absorbs.
  auto reduced = [&](double c, std::size_t u, std::size_t v) {
    return std::max(0.0, c + pot[u] - pot[v]);
  };

  const std::size_t iter_cap = 8 * (m + n) * (m + n) + 64;
  for (std::size_t iter = 0;; ++iter) {
    if (iter > iter_cap) throw ContractError("solve_emd: augmentation did not converge");

    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(prev.begin(), prev.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    dist[src] = 0.0;
    for (std::size_t round = 0; round < vcount; ++round) {
      std::size_t u = vcount;
      for (std::size_t v = 0; v < vcount; ++v) {
        if (!done[v] && dist[v] < kInf && (u == vcount || dist[v] < dist[u])) u = v;
      }
      if (u == vcount) break;
      done[u] = 1;
      auto relax = [&](std::size_t v, double rc) {
        if (!done[v] && dist[u] + rc < dist[v]) {
          dist[v] = dist[u] + rc;
          prev[v] = static_cast<int>(u);
        }
      };
      if (u == src) {
        for (std::size_t i = 0; i < m; ++i) {
          if (p.source_weights[i] - fa[i] > kTol) relax(sup(i), reduced(0.0, src, sup(i)));
        }
      } else if (u >= sup(0) && u <= sup(m - 1)) {
        const std::size_t i = u - 1;
        for (std::size_t j = 0; j < n; ++j) relax(con(j), reduced(p.cost[i][j], u, con(j)));
      } else if (u >= con(0) && u <= con(n - 1)) {
        const std::size_t j = u - 1 - m;
        if (p.target_weights[j] - fb[j] > kTol) relax(snk, reduced(0.0, u, snk));
        for (std::size_t i = 0; i < m; ++i) {
          if (f[i][j] > kTol) relax(sup(i), reduced(-p.cost[i][j], u, sup(i)));
        }
      } else {  // sink
        for (std::size_t j = 0; j < n; ++j) {
          if (fb[j] > kTol) relax(con(j), reduced(0.0, u, con(j)));
        }
      }
    }

    if (dist[snk] >= kInf) break;  // no residual path: all mass shipped

    for (std::size_t v = 0; v < vcount; ++v) {
      pot[v] += dist[v] < kInf ? dist[v] : dist[snk];
    }

    // Bottleneck over the residual capacities along the path.
    double bottleneck = kInf;
    for (int v = static_cast<int>(snk); prev[v] >= 0; v = prev[v]) {
      const std::size_t to = static_cast<std::size_t>(v);
      const std::size_t from = static_cast<std::size_t>(prev[v]);
      double cap = kInf;
      if (from == src) {
        cap = p.source_weights[to - 1] - fa[to - 1];
      } else if (to == snk) {
        cap = p.target_weights[from - 1 - m] - fb[from - 1 - m];
      } else if (from >= con(0)) {
        cap = f[to - 1][from - 1 - m];  // consumer -> supplier reverse arc
      }
      // supplier -> consumer arcs are uncapacitated; sink -> consumer
      // residual (cap fb) cannot appear on a source->sink path.
      bottleneck = std::min(bottleneck, cap);
    }
    if (!(bottleneck > kTol) || !std::isfinite(bottleneck)) {
      throw ContractError("solve_emd: degenerate augmenting path");
    }

    for (int v = static_cast<int>(snk); prev[v] >= 0; v = prev[v]) {
      const std::size_t to = static_cast<std::size_t>(v);
      const std::size_t from = static_cast<std::size_t>(prev[v]);
      if (from == src) {
        fa[to - 1] += bottleneck;
      } else if (to == snk) {
        fb[from - 1 - m] += bottleneck;
      } else if (from >= con(0)) {
        f[to - 1][from - 1 - m] -= bottleneck;  // push back along reverse arc
      } else {
        f[from - 1][to - 1 - m] += bottleneck;
      }
    }
  }

  double shipped = 0.0;
  for (double v : fa) shipped += v;
  if (std::abs(shipped - 1.0) > 1e-9) {
    throw ContractError("solve_emd: plan ships " + std::to_string(shipped) + " of unit mass");
  }

  TransportPlan plan;
  plan.flows = std::move(f);
  double total_cost = 0.0, total_flow = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      total_cost += plan.flows[i][j] * p.cost[i][j];
      total_flow += plan.flows[i][j];
    }
  }
  plan.emd = total_cost / total_flow;
  return plan;
}

// Sim = exp(-gamma * emd).
inline double domain_similarity(double emd_value, double gamma = 0.02) {
  if (gamma <= 0.0) throw ConfigError("domain_similarity: gamma must be positive");
  if (emd_value < 0.0) throw InputError("domain_similarity: emd must be nonnegative");
  return std::exp(-gamma * emd_value);
}

// ---- batch-statistics profiling ----

// Gaussian KDE with Silverman's bandwidth, evaluated on an even grid
// spanning the samples plus three bandwidths of margin.
inline std::vector<std::pair<double, double>> gaussian_kde(const std::vector<double>& xs,
                                                           std::size_t points = 129) {
  if (xs.empty()) throw InputError("gaussian_kde: no samples");
  if (points < 2) throw ConfigError("gaussian_kde: need at least 2 grid points");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double v : xs) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : xs) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double t = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - t) + sorted[hi] * t;
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
  if (spread <= 0.0) spread = std::max(std::abs(mean) * 1e-3, 1e-6);
  const double h = 0.9 * spread * std::pow(n, -0.2);

  const double lo = sorted.front() - 3.0 * h, hi = sorted.back() + 3.0 * h;
  const double norm = 1.0 / (n * h * std::sqrt(2.0 * 3.14159265358979323846));
  std::vector<std::pair<double, double>> curve(points);
  for (std::size_t i = 0; i < points; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    double dens = 0.0;
    for (double v : xs) {
      const double z = (x - v) / h;
      dens += std::exp(-0.5 * z * z);
    }
    curve[i] = {x, dens * norm};
  }
  return curve;
}

struct BnProfile {
  // Per block: the per-channel running means/vars captured at momentum 1.0
  // (i.e. the profiled batch's statistics).
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> vars;

  std::size_t num_blocks() const { return means.size(); }

  std::vector<double> pooled_means() const {
    std::vector<double> out;
    for (const auto& block : means) out.insert(out.end(), block.begin(), block.end());
    return out;
  }
};

// Runs the extractor over the profiling batch with normalization momentum
// forced to 1.0, so each layer's running statistics become exactly the
// profiled batch's statistics; momenta are restored afterwards. Running
// statistics of the model are intentionally overwritten by profiling (the
// caller profiles a copy or re-loads a checkpoint when that matters).
inline BnProfile profile_batch_stats(nn::Backbone& net, const Tensor& images) {
  if (net.num_blocks() == 0) throw ConfigError("profile_batch_stats: model has no layers");
  if (images.rank() != 4 || images.size(0) == 0) {
    throw ConfigError("profile_batch_stats: profiling dataset is empty");
  }
  std::vector<double> saved;
  for (std::size_t b = 0; b < net.num_blocks(); ++b) {
    saved.push_back(net.bn(b).momentum());
    net.bn(b).set_momentum(1.0);
  }
  {
    NoGrad guard;
    net.feature_map(images, nn::BnMode::Training);
  }
  BnProfile prof;
  for (std::size_t b = 0; b < net.num_blocks(); ++b) {
    prof.means.push_back(net.bn(b).running_mean().data());
    prof.vars.push_back(net.bn(b).running_var().data());
    net.bn(b).set_momentum(saved[b]);
  }
  return prof;
}

// ---- CSV emission ----

inline constexpr const char* kProfileCsvHeader = "layer,channel,mean,var";
inline constexpr const char* kKdeCsvHeader = "x,density";
inline constexpr const char* kSimTraceCsvHeader = "episode_id,domain_id,lambda,abs_diff";
inline constexpr const char* kLossTraceCsvHeader = "episode_id,domain_id,lambda,loss,acc";

inline void write_profile_csv(const std::filesystem::path& path, const BnProfile& prof) {
  std::ofstream os(path);
  if (!os) throw IoError("write_profile_csv: cannot open " + path.string());
  os << kProfileCsvHeader << "\n";
  os.precision(17);
  for (std::size_t b = 0; b < prof.num_blocks(); ++b) {
    for (std::size_t c = 0; c < prof.means[b].size(); ++c) {
      os << b << "," << c << "," << prof.means[b][c] << "," << prof.vars[b][c] << "\n";
    }
  }
  if (!os) throw IoError("write_profile_csv: write failed for " + path.string());
}

inline void write_kde_csv(const std::filesystem::path& path,
                          const std::vector<std::pair<double, double>>& curve) {
  std::ofstream os(path);
  if (!os) throw IoError("write_kde_csv: cannot open " + path.string());
  os << kKdeCsvHeader << "\n";
  os.precision(17);
  for (const auto& [x, density] : curve) os << x << "," << density << "\n";
  if (!os) throw IoError("write_kde_csv: write failed for " + path.string());
}

}  // namespace prolad::similarity
