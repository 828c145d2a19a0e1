#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace ogfr {

/// Retrieval features of one image. The global feature is always visible.
struct GalleryEntry {
  int identity = 0;
  int camera = 0;
  std::vector<double> global;              // D
  std::vector<std::vector<double>> parts;  // K × D
  std::vector<std::uint8_t> visibility;    // K
};

double euclidean(const std::vector<double>& a, const std::vector<double>& b);

/// [Σ_i v_i^q v_i^g d(f^i) + d(f^g)] / [Σ_i v_i^q v_i^g + 1].
double distance(const GalleryEntry& query, const GalleryEntry& gallery);

struct EvalOptions {
  /// Drop gallery entries sharing both identity and camera with the query.
  bool exclude_same_camera = true;
  /// Query and gallery are the same list; an entry never retrieves itself.
  bool leave_one_out = false;
};

struct EvalResult {
  double rank1 = 0, rank5 = 0, rank10 = 0, mAP = 0;
  std::size_t n_query = 0, n_gallery = 0;
  std::size_t n_valid_queries = 0;  // queries with at least one admissible true match
};

/// CMC and mAP from a precomputed query × gallery distance matrix (row-major).
EvalResult evaluate_distances(const std::vector<double>& dist, const std::vector<int>& query_ids,
                              const std::vector<int>& query_cams, const std::vector<int>& gallery_ids,
                              const std::vector<int>& gallery_cams, const EvalOptions& opts = {});

EvalResult evaluate(const std::vector<GalleryEntry>& query, const std::vector<GalleryEntry>& gallery,
                    const EvalOptions& opts = {});

/// {rank1, rank5, rank10, mAP, n_query, n_gallery, config_hash}.
nlohmann::json to_json(const EvalResult& r, const std::string& config_hash);

}  // namespace ogfr
