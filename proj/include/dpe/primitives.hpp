#ifndef DPE_PRIMITIVES_HPP
#define DPE_PRIMITIVES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "ingest.hpp"
#include "moments.hpp"

namespace dpe {

/// A maximal run of one label inside a trip.
struct SegmentRef {
    std::string trip_id;
    std::size_t start = 0;
    std::size_t duration = 0;

    friend bool operator==(const SegmentRef&, const SegmentRef&) = default;
};

/// One HSMM state of one vehicle, with moments in physical units.
struct Primitive {
    std::string vehicle_id;
    int label = 0;
    std::uint64_t point_count = 0;
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Zero();
    double fraction = 0.0;
    std::vector<SegmentRef> segments;

    Moments moments() const { return {point_count, mean, cov}; }
};

/**
 * Pool the original (v, a) samples of every label. `labels[k]` must align
 * with `trips[k].samples`. One primitive per used label, ordered by label.
 */
inline std::vector<Primitive> compute_primitives(std::span<const std::vector<int>> labels,
                                                 std::span<const TripSeries> trips, const std::string& vehicle_id) {
    if (labels.size() != trips.size()) {
        throw AlignmentError(vehicle_id + ": " + std::to_string(labels.size()) + " label sequences for " +
                             std::to_string(trips.size()) + " trips");
    }
    std::map<int, Primitive> by_label;
    std::uint64_t total = 0;
    for (std::size_t k = 0; k < trips.size(); ++k) {
        const auto& seq = labels[k];
        const auto& samples = trips[k].samples;
        if (seq.size() != samples.size()) {
            throw AlignmentError(vehicle_id + "/" + trips[k].trip_id + ": " + std::to_string(seq.size()) +
                                 " labels for " + std::to_string(samples.size()) + " samples");
        }
        std::map<int, Moments> acc;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            auto& p = by_label[seq[t]];
            if (t == 0 || seq[t] != seq[t - 1]) p.segments.push_back({trips[k].trip_id, t, 0});
            ++p.segments.back().duration;
            acc[seq[t]].add({samples[t].v, samples[t].a});
        }
        for (const auto& [label, m] : acc) {
            auto& p = by_label[label];
            const Moments merged = Moments::merge(p.moments(), m);
            p.point_count = merged.count;
            p.mean = merged.mean;
            p.cov = merged.cov;
        }
        total += seq.size();
    }
    std::vector<Primitive> out;
    for (auto& [label, p] : by_label) {
        p.vehicle_id = vehicle_id;
        p.label = label;
        p.fraction = total == 0 ? 0.0 : static_cast<double>(p.point_count) / static_cast<double>(total);
        out.push_back(std::move(p));
    }
    return out;
}

/// Descending fraction; ties by larger point_count, then smaller label.
inline void sort_by_rank(std::vector<Primitive>& prims) {
    std::sort(prims.begin(), prims.end(), [](const Primitive& a, const Primitive& b) {
        if (a.fraction != b.fraction) return a.fraction > b.fraction;
        if (a.point_count != b.point_count) return a.point_count > b.point_count;
        return a.label < b.label;
    });
}

/// How many of `n` ranked primitives the tail rule removes.
inline std::size_t tail_prune_count(std::size_t n, double tail_fraction) {
    if (n == 0 || tail_fraction <= 0.0) return 0;
    // Guard against products like 0.05 * 20 landing a hair above an integer.
    const auto k = static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(n) - 1e-9));
    return std::min(k, n - 1);
}

/// Rank one vehicle's primitives and drop the last ceil(tail_fraction * n)
/// by rank position, always keeping at least one.
inline std::vector<Primitive> rank_and_prune(std::vector<Primitive> prims, double tail_fraction = 0.05) {
    sort_by_rank(prims);
    prims.resize(prims.size() - tail_prune_count(prims.size(), tail_fraction));
    return prims;
}

}  // namespace dpe

#endif  // DPE_PRIMITIVES_HPP
