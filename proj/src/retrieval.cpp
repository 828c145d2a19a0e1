#include "ogfr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ogfr/error.hpp"

namespace ogfr {

double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("euclidean: feature lengths differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double distance(const GalleryEntry& q, const GalleryEntry& g) {
  if (q.parts.size() != g.parts.size() || q.visibility.size() != q.parts.size() ||
      g.visibility.size() != g.parts.size()) {
    throw DimensionError("distance: part counts disagree");
  }
  double num = euclidean(q.global, g.global);
  double den = 1.0;
  for (std::size_t i = 0; i < q.parts.size(); ++i) {
    if (q.visibility[i] && g.visibility[i]) {
      num += euclidean(q.parts[i], g.parts[i]);
      den += 1.0;
    }
  }
  return num / den;
}

EvalResult evaluate_distances(const std::vector<double>& dist, const std::vector<int>& query_ids,
                              const std::vector<int>& query_cams, const std::vector<int>& gallery_ids,
                              const std::vector<int>& gallery_cams, const EvalOptions& opts) {
  const std::size_t nq = query_ids.size(), ng = gallery_ids.size();
  if (ng == 0) throw ConfigError("evaluate: empty gallery");
  if (nq == 0) throw ConfigError("evaluate: empty query set");
  if (query_cams.size() != nq || gallery_cams.size() != ng || dist.size() != nq * ng) {
    throw DimensionError("evaluate: inconsistent query/gallery sizes");
  }
  if (opts.leave_one_out && nq != ng) throw ContractError("evaluate: leave-one-out needs query == gallery");

  EvalResult r;
  r.n_query = nq;
  r.n_gallery = ng;
  std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
  double ap_sum = 0;
  std::vector<std::size_t> order;
  for (std::size_t q = 0; q < nq; ++q) {
    order.clear();
    for (std::size_t g = 0; g < ng; ++g) {
      if (opts.leave_one_out && g == q) continue;
      if (opts.exclude_same_camera && gallery_ids[g] == query_ids[q] && gallery_cams[g] == query_cams[q]) continue;
      order.push_back(g);
    }
    const double* row = dist.data() + q * ng;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });

    std::size_t first_hit = order.size(), found = 0;
    double precision_sum = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (gallery_ids[order[k]] != query_ids[q]) continue;
      if (found == 0) first_hit = k;
      ++found;
      precision_sum += static_cast<double>(found) / static_cast<double>(k + 1);
    }
    if (found == 0) continue;
    ++r.n_valid_queries;
    hit1 += first_hit < 1;
    hit5 += first_hit < 5;
    hit10 += first_hit < 10;
    ap_sum += precision_sum / static_cast<double>(found);
  }
  if (r.n_valid_queries == 0) throw ContractError("evaluate: no query has an admissible true match in the gallery");
  const double n = static_cast<double>(r.n_valid_queries);
  r.rank1 = hit1 / n;
  r.rank5 = hit5 / n;
  r.rank10 = hit10 / n;
  r.mAP = ap_sum / n;
  return r;
}

EvalResult evaluate(const std::vector<GalleryEntry>& query, const std::vector<GalleryEntry>& gallery,
                    const EvalOptions& opts) {
  std::vector<double> dist(query.size() * gallery.size());
  std::vector<int> qi, qc, gi, gc;
  for (const auto& e : query) qi.push_back(e.identity), qc.push_back(e.camera);
  for (const auto& e : gallery) gi.push_back(e.identity), gc.push_back(e.camera);
  for (std::size_t q = 0; q < query.size(); ++q)
    for (std::size_t g = 0; g < gallery.size(); ++g) dist[q * gallery.size() + g] = distance(query[q], gallery[g]);
  return evaluate_distances(dist, qi, qc, gi, gc, opts);
}

nlohmann::json to_json(const EvalResult& r, const std::string& config_hash) {
  return {{"rank1", r.rank1},         {"rank5", r.rank5},         {"rank10", r.rank10},
          {"mAP", r.mAP},             {"n_query", r.n_query},     {"n_gallery", r.n_gallery},
          {"n_valid_queries", r.n_valid_queries}, {"config_hash", config_hash}};
}

}  // namespace ogfr
