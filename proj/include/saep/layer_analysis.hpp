#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "saep/error.hpp"
#include "saep/npy.hpp"
#include "saep/parallel.hpp"
#include "saep/tensor.hpp"

namespace saep {

/// Mean pairwise cosine among the rows of [N, C], computed through the
/// normalized-sum identity (‖Σ f̂ᵢ‖² − N) / (N(N−1)) in f64.
inline double intra_layer_similarity(const Tensor& features) {
  require(features.rank() == 2, Errc::shape, "features must be [N, C]");
  const std::int64_t n = features.shape()[0];
  const std::int64_t c = features.shape()[1];
  require(n >= 2, Errc::arg, "intra-layer similarity needs at least two rows");

  std::vector<double> sum(static_cast<std::size_t>(c), 0.0);
  const float* fp = features.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    double ssq = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double v = static_cast<double>(fp[i * c + j]);
      ssq += v * v;
    }
    require(ssq > 0.0, Errc::numeric, "zero-norm feature row");
    const double inv = 1.0 / std::sqrt(ssq);
    for (std::int64_t j = 0; j < c; ++j)
      sum[static_cast<std::size_t>(j)] += static_cast<double>(fp[i * c + j]) * inv;
  }
  double norm_sq = 0.0;
  for (double v : sum) norm_sq += v * v;
  const double nn = static_cast<double>(n);
  const double mean = (norm_sq - nn) / (nn * (nn - 1.0));
  return std::clamp(mean, -1.0, 1.0);
}

/// Position-matched mean cosine: (1/N) Σᵢ cos(aᵢ, bᵢ).
inline double inter_layer_similarity(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.same_shape(b), Errc::shape,
          "inter-layer similarity needs two [N, C] tensors of one shape");
  const std::int64_t n = a.shape()[0];
  const std::int64_t c = a.shape()[1];
  const float* ap = a.data().data();
  const float* bp = b.data().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double x = static_cast<double>(ap[i * c + j]);
      const double y = static_cast<double>(bp[i * c + j]);
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    require(na > 0.0 && nb > 0.0, Errc::numeric, "zero-norm feature row");
    acc += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return std::clamp(acc / static_cast<double>(n), -1.0, 1.0);
}

struct LayerSimilarityReport {
  std::int64_t num_layers = 0;
  std::int64_t images = 0;
  std::vector<double> intra;  // one per layer
  std::vector<double> inter;  // between layer X and X+1, so L-1 entries
};

namespace detail {
inline bool is_perfect_square(std::int64_t n) {
  if (n < 1) return false;
  const std::int64_t r = std::llround(std::sqrt(static_cast<double>(n)));
  for (std::int64_t t = std::max<std::int64_t>(0, r - 1); t <= r + 1; ++t)
    if (t * t == n) return true;
  return false;
}

/// Encoder dumps may carry a leading CLS row. Without grid extents to hand,
/// treat a row count that is one above a perfect square (and not itself one)
/// as CLS + square patch grid.
inline Tensor strip_cls_row(Tensor t) {
  require(t.rank() == 2, Errc::format, "layer dump must be [N, C]");
  const std::int64_t rows = t.shape()[0];
  const std::int64_t cols = t.shape()[1];
  if (rows >= 2 && is_perfect_square(rows - 1) && !is_perfect_square(rows)) {
    Tensor body({rows - 1, cols});
    std::copy(t.data().begin() + cols, t.data().end(), body.data().begin());
    return body;
  }
  return t;
}

inline std::vector<std::filesystem::path> layer_files(
    const std::filesystem::path& image_dir) {
  static const std::regex name_re(R"(layer_(\d+)\.npy)");
  std::vector<std::pair<std::int64_t, std::filesystem::path>> found;
  try {
    for (const auto& entry : std::filesystem::directory_iterator(image_dir)) {
      if (!entry.is_regular_file()) continue;
      std::smatch m;
      const std::string name = entry.path().filename().string();
      if (!std::regex_match(name, m, name_re)) continue;
      std::int64_t idx = 0;
      try {
        idx = std::stoll(m[1].str());
      } catch (const std::exception&) {
        fail(Errc::format, entry.path().string() + ": unparsable layer index");
      }
      found.emplace_back(idx, entry.path());
    }
  } catch (const std::filesystem::filesystem_error& e) {
    fail(Errc::io, std::string("cannot scan ") + image_dir.string() + ": " + e.what());
  }
  require(!found.empty(), Errc::format,
          image_dir.string() + ": no layer_XX.npy files");
  std::sort(found.begin(), found.end());
  for (std::size_t i = 0; i < found.size(); ++i)
    require(found[i].first == static_cast<std::int64_t>(i) + 1, Errc::format,
            image_dir.string() + ": layer files must be numbered 1..L without gaps");
  std::vector<std::filesystem::path> paths;
  for (auto& [idx, p] : found) paths.push_back(std::move(p));
  return paths;
}
}  // namespace detail

/// Averages per-image intra/inter similarities over every image directory in
/// `dumps_dir` (one subdirectory per image, files layer_01.npy .. layer_LL.npy).
inline LayerSimilarityReport build_report(const std::filesystem::path& dumps_dir) {
  require(std::filesystem::is_directory(dumps_dir), Errc::io,
          dumps_dir.string() + " is not a readable directory");
  std::vector<std::filesystem::path> image_dirs;
  try {
    for (const auto& entry : std::filesystem::directory_iterator(dumps_dir))
      if (entry.is_directory()) image_dirs.push_back(entry.path());
  } catch (const std::filesystem::filesystem_error& e) {
    fail(Errc::io, std::string("cannot scan ") + dumps_dir.string() + ": " + e.what());
  }
  require(!image_dirs.empty(), Errc::format,
          dumps_dir.string() + ": no image directories");
  std::sort(image_dirs.begin(), image_dirs.end());

  const std::int64_t n_images = static_cast<std::int64_t>(image_dirs.size());
  std::vector<std::vector<double>> per_intra(static_cast<std::size_t>(n_images));
  std::vector<std::vector<double>> per_inter(static_cast<std::size_t>(n_images));
  parallel_for(
      n_images,
      [&](std::int64_t i) {
        const auto files = detail::layer_files(image_dirs[static_cast<std::size_t>(i)]);
        std::vector<Tensor> layers;
        layers.reserve(files.size());
        for (const auto& f : files) {
          Tensor t = detail::strip_cls_row(tensor_from_npy(f));
          if (!layers.empty())
            require(t.same_shape(layers.front()), Errc::format,
                    f.string() + ": layer shape differs within one image");
          layers.push_back(std::move(t));
        }
        auto& intra = per_intra[static_cast<std::size_t>(i)];
        auto& inter = per_inter[static_cast<std::size_t>(i)];
        for (const Tensor& t : layers) intra.push_back(intra_layer_similarity(t));
        for (std::size_t l = 0; l + 1 < layers.size(); ++l)
          inter.push_back(inter_layer_similarity(layers[l], layers[l + 1]));
      },
      /*grain=*/2);

  LayerSimilarityReport rep;
  rep.images = n_images;
  rep.num_layers = static_cast<std::int64_t>(per_intra[0].size());
  for (std::int64_t i = 1; i < n_images; ++i)
    require(static_cast<std::int64_t>(per_intra[static_cast<std::size_t>(i)].size()) ==
                rep.num_layers,
            Errc::format,
            image_dirs[static_cast<std::size_t>(i)].string() +
                ": layer count differs across images");

  rep.intra.assign(static_cast<std::size_t>(rep.num_layers), 0.0);
  rep.inter.assign(static_cast<std::size_t>(std::max<std::int64_t>(rep.num_layers - 1, 0)),
                   0.0);
  for (std::int64_t i = 0; i < n_images; ++i) {
    for (std::size_t l = 0; l < rep.intra.size(); ++l)
      rep.intra[l] += per_intra[static_cast<std::size_t>(i)][l];
    for (std::size_t l = 0; l < rep.inter.size(); ++l)
      rep.inter[l] += per_inter[static_cast<std::size_t>(i)][l];
  }
  for (double& v : rep.intra) v /= static_cast<double>(n_images);
  for (double& v : rep.inter) v /= static_cast<double>(n_images);
  return rep;
}

struct LayerSelection {
  std::vector<std::int64_t> selected;
  std::int64_t anchor_low = 0;
  std::int64_t pivot = 0;
};

/// Deterministic selection heuristic. Layers are 1-based. Anchor = lowest
/// intra-layer similarity; pivot = argmax of intra[ℓ] − inter(ℓ−1,ℓ) +
/// inter(ℓ,ℓ+1) strictly between anchor and last_usable; K−3 in-between
/// layers at uniform integer spacing; last_usable closes the set.
inline LayerSelection select_layers(const LayerSimilarityReport& rep,
                                    std::int64_t k, std::int64_t last_usable) {
  const std::int64_t L = rep.num_layers;
  require(static_cast<std::int64_t>(rep.intra.size()) == L &&
              static_cast<std::int64_t>(rep.inter.size()) == L - 1 && L >= 3,
          Errc::arg, "report is inconsistent or too short");
  require(k >= 3, Errc::arg, "at least 3 layers must be selected");
  require(last_usable >= 1 && last_usable <= L, Errc::arg,
          "last_usable must lie in [1, L]");

  std::int64_t anchor = 1;
  for (std::int64_t l = 2; l <= last_usable; ++l)
    if (rep.intra[static_cast<std::size_t>(l - 1)] <
        rep.intra[static_cast<std::size_t>(anchor - 1)])
      anchor = l;

  // score(ℓ) needs both neighbours, so ℓ ranges over [max(anchor+1,2), min(last−1, L−1)].
  const std::int64_t lo = std::max<std::int64_t>(anchor + 1, 2);
  const std::int64_t hi = std::min<std::int64_t>(last_usable - 1, L - 1);
  require(lo <= hi, Errc::arg, "no room for a pivot between anchor and last_usable");
  auto score = [&](std::int64_t l) {
    return rep.intra[static_cast<std::size_t>(l - 1)] -
           rep.inter[static_cast<std::size_t>(l - 2)] +
           rep.inter[static_cast<std::size_t>(l - 1)];
  };
  std::int64_t pivot = lo;
  for (std::int64_t l = lo + 1; l <= hi; ++l)
    if (score(l) > score(pivot)) pivot = l;

  const std::int64_t fills = k - 3;
  require(fills <= pivot - anchor - 1, Errc::arg,
          "not enough layers between anchor and pivot for the requested K");

  std::vector<std::int64_t> selected = {anchor, pivot, last_usable};
  auto taken = [&](std::int64_t l) {
    return std::find(selected.begin(), selected.end(), l) != selected.end();
  };
  std::int64_t step = std::llround(static_cast<double>(pivot - anchor) /
                                   static_cast<double>(k - 2));
  if (step < 1) step = 1;
  for (std::int64_t j = 1; j <= fills; ++j) {
    const std::int64_t want = anchor + j * step;
    // Nearest unused slot strictly inside (anchor, pivot), upward first.
    std::int64_t chosen = -1;
    for (std::int64_t off = 0; off < pivot - anchor && chosen < 0; ++off) {
      for (const std::int64_t cand : {want + off, want - off}) {
        if (cand > anchor && cand < pivot && !taken(cand)) {
          chosen = cand;
          break;
        }
      }
    }
    require(chosen > 0, Errc::arg, "uniform fill exhausted the anchor-pivot gap");
    selected.push_back(chosen);
  }
  std::sort(selected.begin(), selected.end());

  LayerSelection out;
  out.selected = std::move(selected);
  out.anchor_low = anchor;
  out.pivot = pivot;
  return out;
}

// ---------------------------------------------------------------------------
// JSON forms.

inline nlohmann::json report_to_json(const LayerSimilarityReport& rep) {
  return nlohmann::json{{"num_layers", rep.num_layers},
                        {"images", rep.images},
                        {"intra", rep.intra},
                        {"inter", rep.inter}};
}

inline LayerSimilarityReport report_from_json(const nlohmann::json& j) {
  LayerSimilarityReport rep;
  try {
    rep.num_layers = j.at("num_layers").get<std::int64_t>();
    rep.images = j.at("images").get<std::int64_t>();
    rep.intra = j.at("intra").get<std::vector<double>>();
    rep.inter = j.at("inter").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("bad similarity report: ") + e.what());
  }
  require(static_cast<std::int64_t>(rep.intra.size()) == rep.num_layers &&
              static_cast<std::int64_t>(rep.inter.size()) ==
                  std::max<std::int64_t>(rep.num_layers - 1, 0),
          Errc::format, "similarity report has inconsistent lengths");
  return rep;
}

inline LayerSimilarityReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, path.string() + ": " + e.what());
  }
  return report_from_json(j);
}

inline nlohmann::json selection_to_json(const LayerSelection& sel) {
  return nlohmann::json{{"selected", sel.selected},
                        {"anchor_low", sel.anchor_low},
                        {"pivot", sel.pivot}};
}

}  // namespace saep
