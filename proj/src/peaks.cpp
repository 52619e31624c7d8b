#include "nac/peaks.hpp"

#include "nac/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace nac {

void GeneratorConfig::validate() const {
  auto bad = [](bool cond, const char* msg) {
    if (cond) throw std::invalid_argument(std::string("generator config: ") + msg);
  };
  bad(center_box_half < 0 || center_box_half > kPatchMid, "center box out of patch");
  bad(sigma_min <= 0 || sigma_min >= sigma_max, "sigma range");
  bad(amp_min <= 0 || amp_min >= amp_max, "amplitude range");
  bad(bg_min < 0 || bg_min > bg_max, "background range");
  bad(noise_level < 0, "negative noise level");
}

double pseudo_voigt_at(const PeakParams& p, double r, double c) {
  const double dr = r - p.row, dc = c - p.col;
  const double qr = dr * dr / (p.sigma_r * p.sigma_r);
  const double qc = dc * dc / (p.sigma_c * p.sigma_c);
  const double gauss = std::exp(-0.5 * (qr + qc));
  const double lorentz = 1.0 / (1.0 + qr + qc);
  return p.background + p.amplitude * (p.eta * lorentz + (1.0 - p.eta) * gauss);
}

void pseudo_voigt_2d(const PeakParams& p, float* out) {
  for (Index r = 0; r < kPatch; ++r) {
    for (Index c = 0; c < kPatch; ++c) {
      out[r * kPatch + c] = static_cast<float>(pseudo_voigt_at(p, r, c));
    }
  }
}

PeakDataset generate_dataset(const GeneratorConfig& cfg, Index n,
                             std::uint64_t seed) {
  cfg.validate();
  if (n < 10) throw std::invalid_argument("generate_dataset: n must be >= 10");

  PeakDataset ds;
  ds.patches = Tensor({n, 1, kPatch, kPatch});
  ds.labels = Tensor({n, 2});
  ds.true_params.resize(n);

  double buf[kPatchPixels];
  for (Index i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    PeakParams p;
    p.row = uniform_real(rng, kPatchMid - cfg.center_box_half,
                         kPatchMid + cfg.center_box_half);
    p.col = uniform_real(rng, kPatchMid - cfg.center_box_half,
                         kPatchMid + cfg.center_box_half);
    p.sigma_r = uniform_real(rng, cfg.sigma_min, cfg.sigma_max);
    p.sigma_c = uniform_real(rng, cfg.sigma_min, cfg.sigma_max);
    p.eta = uniform_real(rng, 0.0, 1.0);
    p.amplitude = uniform_real(rng, cfg.amp_min, cfg.amp_max);
    p.background = uniform_real(rng, cfg.bg_min, cfg.bg_max);
    ds.true_params[i] = p;

    for (Index r = 0; r < kPatch; ++r) {
      for (Index c = 0; c < kPatch; ++c) {
        double v = pseudo_voigt_at(p, static_cast<double>(r), static_cast<double>(c));
        if (cfg.noise_level > 0) {
          v += normal(rng, 0.0, cfg.noise_level * std::sqrt(std::max(v, 1.0)));
        }
        buf[r * kPatch + c] = v;
      }
    }
    const auto [mn, mx] = std::minmax_element(buf, buf + kPatchPixels);
    const double span = *mx - *mn;
    float* out = ds.patches.data() + i * kPatchPixels;
    for (Index j = 0; j < kPatchPixels; ++j) {
      out[j] = span > 0 ? static_cast<float>((buf[j] - *mn) / span) : 0.0f;
    }
    ds.labels[i * 2] = static_cast<float>(p.row / kPatch);
    ds.labels[i * 2 + 1] = static_cast<float>(p.col / kPatch);
  }

  // 80-10-10 with floor rounding, remainder to train; seeded permutation.
  const Index n_val = n / 10, n_test = n / 10;
  const Index n_train = n - n_val - n_test;
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng split_rng(derive_seed(seed, 0xD5117ULL));
  std::shuffle(perm.begin(), perm.end(), split_rng);
  ds.split.assign(n, 0);
  for (Index j = 0; j < n; ++j) {
    const std::uint8_t code = j < n_train ? 0 : (j < n_train + n_val ? 1 : 2);
    ds.split[perm[j]] = code;
  }
  return ds;
}

std::vector<Index> split_indices(const PeakDataset& ds, Split s) {
  std::vector<Index> idx;
  for (Index i = 0; i < ds.size(); ++i) {
    if (ds.split[i] == static_cast<std::uint8_t>(s)) idx.push_back(i);
  }
  return idx;
}

Tensor gather_patches(const PeakDataset& ds, const std::vector<Index>& idx,
                      Index begin, Index count) {
  Tensor out({count, 1, kPatch, kPatch});
  for (Index j = 0; j < count; ++j) {
    std::memcpy(out.data() + j * kPatchPixels,
                ds.patches.data() + idx[begin + j] * kPatchPixels,
                sizeof(float) * kPatchPixels);
  }
  return out;
}

Tensor gather_labels(const PeakDataset& ds, const std::vector<Index>& idx,
                     Index begin, Index count) {
  Tensor out({count, 2});
  for (Index j = 0; j < count; ++j) {
    out[j * 2] = ds.labels[idx[begin + j] * 2];
    out[j * 2 + 1] = ds.labels[idx[begin + j] * 2 + 1];
  }
  return out;
}

CenterEstimate center_of_mass(const float* patch) {
  double total = 0.0, mr = 0.0, mc = 0.0;
  for (Index r = 0; r < kPatch; ++r) {
    for (Index c = 0; c < kPatch; ++c) {
      const double v = patch[r * kPatch + c];
      if (v < 0) throw std::invalid_argument("center_of_mass: negative intensity");
      total += v;
      mr += v * r;
      mc += v * c;
    }
  }
  if (total <= 0) throw std::invalid_argument("center_of_mass: zero-sum patch");
  return {mr / total, mc / total};
}

namespace {

struct Objective {
  const float* patch;
  mutable int evals = 0;

  static PeakParams decode(const double* th) {
    PeakParams p;
    p.row = th[0];
    p.col = th[1];
    p.sigma_r = std::clamp(th[2], 0.2, 6.0);
    p.sigma_c = std::clamp(th[3], 0.2, 6.0);
    p.eta = std::clamp(th[4], 0.0, 1.0);
    p.amplitude = th[5];
    p.background = th[6];
    return p;
  }

  double operator()(const double* th) const {
    ++evals;
    const PeakParams p = decode(th);
    double ssr = 0.0;
    for (Index r = 0; r < kPatch; ++r) {
      for (Index c = 0; c < kPatch; ++c) {
        const double d = pseudo_voigt_at(p, r, c) - patch[r * kPatch + c];
        ssr += d * d;
      }
    }
    return ssr;
  }
};

constexpr int kDim = 7;

// Standard Nelder-Mead; keeps the best vertex, stops on budget or a
// collapsed simplex.
double nelder_mead(const Objective& f, double* x, const double* step,
                   int max_evals) {
  using Vec = std::array<double, kDim>;
  std::array<Vec, kDim + 1> vx;
  std::array<double, kDim + 1> vf;
  for (int v = 0; v <= kDim; ++v) {
    for (int d = 0; d < kDim; ++d) vx[v][d] = x[d];
    if (v > 0) vx[v][v - 1] += step[v - 1];
    vf[v] = f(vx[v].data());
  }
  auto order = [&] {
    std::array<int, kDim + 1> idx;
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return vf[a] < vf[b]; });
    std::array<Vec, kDim + 1> nx;
    std::array<double, kDim + 1> nf;
    for (int v = 0; v <= kDim; ++v) {
      nx[v] = vx[idx[v]];
      nf[v] = vf[idx[v]];
    }
    vx = nx;
    vf = nf;
  };
  order();

  while (f.evals < max_evals) {
    if (vf[kDim] - vf[0] <= 1e-14 * (std::abs(vf[0]) + 1e-30)) break;
    Vec centroid{};
    for (int v = 0; v < kDim; ++v) {
      for (int d = 0; d < kDim; ++d) centroid[d] += vx[v][d] / kDim;
    }
    Vec refl;
    for (int d = 0; d < kDim; ++d) refl[d] = centroid[d] + (centroid[d] - vx[kDim][d]);
    const double fr = f(refl.data());
    if (fr < vf[0]) {
      Vec exp_;
      for (int d = 0; d < kDim; ++d) {
        exp_[d] = centroid[d] + 2.0 * (centroid[d] - vx[kDim][d]);
      }
      const double fe = f(exp_.data());
      if (fe < fr) {
        vx[kDim] = exp_;
        vf[kDim] = fe;
      } else {
        vx[kDim] = refl;
        vf[kDim] = fr;
      }
    } else if (fr < vf[kDim - 1]) {
      vx[kDim] = refl;
      vf[kDim] = fr;
    } else {
      Vec con;
      const bool outside = fr < vf[kDim];
      for (int d = 0; d < kDim; ++d) {
        con[d] = outside ? centroid[d] + 0.5 * (refl[d] - centroid[d])
                         : centroid[d] + 0.5 * (vx[kDim][d] - centroid[d]);
      }
      const double fc = f(con.data());
      if (fc < std::min(fr, vf[kDim])) {
        vx[kDim] = con;
        vf[kDim] = fc;
      } else {
        for (int v = 1; v <= kDim; ++v) {
          for (int d = 0; d < kDim; ++d) {
            vx[v][d] = vx[0][d] + 0.5 * (vx[v][d] - vx[0][d]);
          }
          vf[v] = f(vx[v].data());
          if (f.evals >= max_evals) break;
        }
      }
    }
    order();
  }
  for (int d = 0; d < kDim; ++d) x[d] = vx[0][d];
  return vf[0];
}

}  // namespace

FitResult fit_pseudo_voigt(const float* patch, int max_evals) {
  const auto [mn_it, mx_it] = std::minmax_element(patch, patch + kPatchPixels);
  const double lo = *mn_it, hi = *mx_it;
  if (hi - lo <= 0) {
    throw std::invalid_argument("fit_pseudo_voigt: constant patch");
  }

  // Moment init on the background-subtracted patch.
  double total = 0.0, mr = 0.0, mc = 0.0;
  for (Index r = 0; r < kPatch; ++r) {
    for (Index c = 0; c < kPatch; ++c) {
      const double w = patch[r * kPatch + c] - lo;
      total += w;
      mr += w * r;
      mc += w * c;
    }
  }
  mr /= total;
  mc /= total;
  double vr = 0.0, vc = 0.0;
  for (Index r = 0; r < kPatch; ++r) {
    for (Index c = 0; c < kPatch; ++c) {
      const double w = patch[r * kPatch + c] - lo;
      vr += w * (r - mr) * (r - mr);
      vc += w * (c - mc) * (c - mc);
    }
  }
  const double s0r = std::clamp(std::sqrt(vr / total), 0.5, 3.0);
  const double s0c = std::clamp(std::sqrt(vc / total), 0.5, 3.0);

  double theta[kDim] = {mr, mc, s0r, s0c, 0.5, hi - lo, lo};
  const double step[kDim] = {0.4,       0.4,       0.3 * s0r, 0.3 * s0c, 0.25,
                             0.2 * (hi - lo), 0.1 * (hi - lo)};

  Objective obj{patch};
  double best = nelder_mead(obj, theta, step, max_evals);
  // One restart from the incumbent sharpens stalled simplices.
  if (obj.evals < max_evals - 8 * kDim) {
    double theta2[kDim];
    std::copy(theta, theta + kDim, theta2);
    double step2[kDim];
    for (int d = 0; d < kDim; ++d) step2[d] = 0.1 * step[d] + 1e-4;
    const double again = nelder_mead(obj, theta2, step2, max_evals);
    if (again < best) {
      best = again;
      std::copy(theta2, theta2 + kDim, theta);
    }
  }

  FitResult res;
  res.params = Objective::decode(theta);
  res.rms_residual = std::sqrt(best / kPatchPixels);
  res.evaluations = obj.evals;
  res.converged = res.rms_residual <= 0.05 * (hi - lo);
  return res;
}

// --------------------------------------------------------------------------
// Dataset container: magic "NACD", u32 version, u32 count, split codes,
// then per sample 121 + 2 little-endian f32.
// --------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'N', 'A', 'C', 'D'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_dataset(const std::string& path, const PeakDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  out.write(kMagic, 4);
  const std::uint32_t version = kVersion;
  const std::uint32_t n = static_cast<std::uint32_t>(ds.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&n), 4);
  out.write(reinterpret_cast<const char*>(ds.split.data()), n);
  for (Index i = 0; i < ds.size(); ++i) {
    out.write(reinterpret_cast<const char*>(ds.patches.data() + i * kPatchPixels),
              sizeof(float) * kPatchPixels);
    out.write(reinterpret_cast<const char*>(ds.labels.data() + i * 2),
              sizeof(float) * 2);
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

PeakDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_dataset: bad magic in " + path);
  }
  std::uint32_t version = 0, n = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&n), 4);
  if (!in || version != kVersion) {
    throw std::runtime_error("load_dataset: unsupported version in " + path);
  }
  PeakDataset ds;
  ds.split.resize(n);
  in.read(reinterpret_cast<char*>(ds.split.data()), n);
  ds.patches = Tensor({static_cast<Index>(n), 1, kPatch, kPatch});
  ds.labels = Tensor({static_cast<Index>(n), 2});
  for (std::uint32_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(ds.patches.data() + i * kPatchPixels),
            sizeof(float) * kPatchPixels);
    in.read(reinterpret_cast<char*>(ds.labels.data() + i * 2), sizeof(float) * 2);
  }
  if (!in) throw std::runtime_error("load_dataset: truncated file " + path);
  return ds;
}

}  // namespace nac
