#ifndef DPE_INGEST_HPP
#define DPE_INGEST_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "error.hpp"
#include "moments.hpp"

namespace dpe {

enum class VehicleClass { light_duty_car, bus, other };

inline std::string_view to_string(VehicleClass c) {
    switch (c) {
        case VehicleClass::light_duty_car: return "light_duty_car";
        case VehicleClass::bus: return "bus";
        case VehicleClass::other: return "other";
    }
    return "other";
}

inline VehicleClass vehicle_class_from_string(std::string_view s) {
    if (s == "light_duty_car") return VehicleClass::light_duty_car;
    if (s == "bus") return VehicleClass::bus;
    if (s == "other") return VehicleClass::other;
    throw DataError("UnknownVehicleClass", std::string(s));
}

/// One CAN sample. Speed in m/s, acceleration in m/s^2.
struct Sample {
    double t = 0.0;
    double v = 0.0;
    double a = 0.0;
    std::optional<double> fuel_rate;
    std::optional<double> emission_rate;
    bool valid = true;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct TripSeries {
    std::string vehicle_id;
    std::string trip_id;
    double rate_hz = 10.0;
    std::vector<Sample> samples;
    VehicleClass vehicle_class = VehicleClass::light_duty_car;

    double duration_s() const {
        return samples.empty() ? 0.0 : static_cast<double>(samples.size() - 1) / rate_hz;
    }

    std::vector<Vec2> points() const {
        std::vector<Vec2> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.emplace_back(s.v, s.a);
        return out;
    }
};

/// Filter applied before segmentation: vehicle class, validity flag and a
/// minimum amount of driving per vehicle.
struct FleetQuery {
    double min_total_duration_s = 3600.0;
    bool require_valid_flag = true;
    std::set<VehicleClass> allowed_classes{VehicleClass::light_duty_car};
};

/// All surviving trips of one vehicle.
struct VehicleTrips {
    std::string vehicle_id;
    VehicleClass vehicle_class = VehicleClass::light_duty_car;
    std::vector<TripSeries> trips;

    double total_duration_s() const {
        double d = 0.0;
        for (const auto& t : trips) d += t.duration_s();
        return d;
    }

    std::size_t sample_count() const {
        std::size_t n = 0;
        for (const auto& t : trips) n += t.samples.size();
        return n;
    }
};

struct StandardizationParams {
    Vec2 mean = Vec2::Zero();
    Vec2 std = Vec2::Ones();

    Vec2 apply(const Vec2& x) const { return (x - mean).cwiseQuotient(std); }
    Vec2 invert(const Vec2& z) const { return z.cwiseProduct(std) + mean; }
};

/// Identity of a trip file; the CSV itself carries only samples.
struct TripInfo {
    std::string vehicle_id;
    std::string trip_id;
    double rate_hz = 10.0;
    VehicleClass vehicle_class = VehicleClass::light_duty_car;
};

/// Central differences of v (one-sided at the ends), smoothed by a 3-tap
/// moving average that shrinks to the available taps at the ends.
inline std::vector<double> derive_acceleration(std::span<const double> v, double rate_hz) {
    const std::size_t n = v.size();
    std::vector<double> diff(n, 0.0);
    if (n < 2) return diff;
    for (std::size_t i = 0; i < n; ++i) {
        if (i == 0) {
            diff[i] = (v[1] - v[0]) * rate_hz;
        } else if (i + 1 == n) {
            diff[i] = (v[i] - v[i - 1]) * rate_hz;
        } else {
            diff[i] = (v[i + 1] - v[i - 1]) * rate_hz / 2.0;
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i == 0 ? 0 : i - 1;
        const std::size_t hi = std::min(n - 1, i + 1);
        double s = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) s += diff[j];
        out[i] = s / static_cast<double>(hi - lo + 1);
    }
    return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
    return out;
}

inline std::optional<double> parse_double(std::string_view s) {
    double value = 0.0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc() || ptr != end || !std::isfinite(value)) return std::nullopt;
    return value;
}

inline std::string format_double(double x) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, ptr);
}

}  // namespace detail

/**
 * Parse one trip CSV with header `t,v,a[,fuel_rate][,emission_rate],valid`.
 * Columns are matched by name; when `a` is absent it is derived from v.
 * Rows with valid=0 are kept and flagged.
 */
inline TripSeries parse_trip_csv(std::istream& in, const TripInfo& info) {
    TripSeries trip;
    trip.vehicle_id = info.vehicle_id;
    trip.trip_id = info.trip_id;
    trip.rate_hz = info.rate_hz;
    trip.vehicle_class = info.vehicle_class;

    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string_view> header;
    std::string header_line;
    while (std::getline(in, line)) {
        ++line_no;
        if (!detail::trim(line).empty()) {
            header_line = line;
            header = detail::split_csv(header_line);
            break;
        }
    }
    if (header.empty()) throw EmptyFile(info.vehicle_id + "/" + info.trip_id + ": no header");

    std::map<std::string, std::size_t, std::less<>> col;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const std::string name(header[i]);
        if (name != "t" && name != "v" && name != "a" && name != "fuel_rate" && name != "emission_rate" &&
            name != "valid") {
            throw MalformedRow("line " + std::to_string(line_no) + ": unknown column '" + name + "'");
        }
        if (!col.emplace(name, i).second) {
            throw MalformedRow("line " + std::to_string(line_no) + ": duplicate column '" + name + "'");
        }
    }
    for (const char* required : {"t", "v", "valid"}) {
        if (!col.contains(required)) {
            throw MalformedRow("line " + std::to_string(line_no) + ": missing column '" + required + "'");
        }
    }
    const bool has_a = col.contains("a");

    auto field = [&](const std::vector<std::string_view>& row, std::string_view name) -> std::optional<std::string_view> {
        auto it = col.find(name);
        if (it == col.end()) return std::nullopt;
        return row[it->second];
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto row = detail::split_csv(line);
        const std::string where = "line " + std::to_string(line_no);
        if (row.size() != header.size()) {
            throw MalformedRow(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                               std::to_string(row.size()));
        }
        Sample s;
        auto number = [&](std::string_view name) {
            auto v = detail::parse_double(*field(row, name));
            if (!v) throw MalformedRow(where + ": bad value for '" + std::string(name) + "'");
            return *v;
        };
        s.t = number("t");
        s.v = number("v");
        if (has_a) s.a = number("a");
        for (auto [name, slot] : {std::pair{"fuel_rate", &s.fuel_rate}, std::pair{"emission_rate", &s.emission_rate}}) {
            if (auto f = field(row, name); f && !f->empty()) {
                auto v = detail::parse_double(*f);
                if (!v) throw MalformedRow(where + ": bad value for '" + std::string(name) + "'");
                *slot = *v;
            }
        }
        const std::string_view valid = *field(row, "valid");
        if (valid == "1" || valid == "true") {
            s.valid = true;
        } else if (valid == "0" || valid == "false") {
            s.valid = false;
        } else {
            throw MalformedRow(where + ": bad value for 'valid'");
        }
        if (s.t < 0.0) throw MalformedRow(where + ": negative time");
        if (s.v < 0.0) throw MalformedRow(where + ": negative speed");
        if (!trip.samples.empty() && !(s.t > trip.samples.back().t)) {
            throw NonMonotonicTime(where + ": t=" + detail::format_double(s.t) + " does not increase");
        }
        trip.samples.push_back(s);
    }
    if (trip.samples.empty()) throw EmptyFile(info.vehicle_id + "/" + info.trip_id + ": header only");

    if (!has_a) {
        std::vector<double> v;
        v.reserve(trip.samples.size());
        for (const auto& s : trip.samples) v.push_back(s.v);
        const auto a = derive_acceleration(v, trip.rate_hz);
        for (std::size_t i = 0; i < a.size(); ++i) trip.samples[i].a = a[i];
    }
    return trip;
}

/// Write a trip in the same CSV format parse_trip_csv reads. Optional
/// channels are emitted when any sample carries them.
inline void write_trip_csv(std::ostream& out, const TripSeries& trip) {
    const bool fuel = std::any_of(trip.samples.begin(), trip.samples.end(),
                                  [](const Sample& s) { return s.fuel_rate.has_value(); });
    const bool emission = std::any_of(trip.samples.begin(), trip.samples.end(),
                                      [](const Sample& s) { return s.emission_rate.has_value(); });
    out << "t,v,a";
    if (fuel) out << ",fuel_rate";
    if (emission) out << ",emission_rate";
    out << ",valid\n";
    for (const auto& s : trip.samples) {
        out << detail::format_double(s.t) << ',' << detail::format_double(s.v) << ',' << detail::format_double(s.a);
        if (fuel) out << ',' << (s.fuel_rate ? detail::format_double(*s.fuel_rate) : "");
        if (emission) out << ',' << (s.emission_rate ? detail::format_double(*s.emission_rate) : "");
        out << ',' << (s.valid ? '1' : '0') << '\n';
    }
}

/**
 * Apply the fleet query. Invalid samples are dropped (when required) and
 * trips are split wherever consecutive samples are more than 1.5 sample
 * periods apart, so a trip never bridges a hole. Split pieces are named
 * `<trip_id>#<k>`. Output is ordered by vehicle_id; trips keep input order.
 */
inline std::vector<VehicleTrips> filter_fleet(std::span<const TripSeries> trips, const FleetQuery& q) {
    std::map<std::string, VehicleTrips> by_vehicle;
    for (const auto& trip : trips) {
        if (!q.allowed_classes.contains(trip.vehicle_class)) continue;
        std::vector<TripSeries> pieces;
        TripSeries current;
        auto flush = [&] {
            if (!current.samples.empty()) pieces.push_back(std::move(current));
            current = TripSeries{};
        };
        const double max_gap = 1.5 / trip.rate_hz;
        for (const auto& s : trip.samples) {
            if (q.require_valid_flag && !s.valid) {
                flush();
                continue;
            }
            if (!current.samples.empty() && s.t - current.samples.back().t > max_gap) flush();
            current.samples.push_back(s);
        }
        flush();
        for (std::size_t k = 0; k < pieces.size(); ++k) {
            auto& p = pieces[k];
            p.vehicle_id = trip.vehicle_id;
            p.trip_id = pieces.size() == 1 ? trip.trip_id : trip.trip_id + "#" + std::to_string(k);
            p.rate_hz = trip.rate_hz;
            p.vehicle_class = trip.vehicle_class;
            auto& vt = by_vehicle[trip.vehicle_id];
            vt.vehicle_id = trip.vehicle_id;
            vt.vehicle_class = trip.vehicle_class;
            vt.trips.push_back(std::move(p));
        }
    }
    std::vector<VehicleTrips> out;
    for (auto& [id, vt] : by_vehicle) {
        if (vt.total_duration_s() >= q.min_total_duration_s) out.push_back(std::move(vt));
    }
    return out;
}

/// z-score both channels with population statistics (divisor n).
inline std::pair<std::vector<Vec2>, StandardizationParams> standardize(std::span<const Vec2> samples) {
    if (samples.size() < 2) throw ZeroVariance("need at least 2 samples, got " + std::to_string(samples.size()));
    const double n = static_cast<double>(samples.size());
    Vec2 mean = Vec2::Zero();
    for (const auto& x : samples) mean += x;
    mean /= n;
    Vec2 var = Vec2::Zero();
    for (const auto& x : samples) var += (x - mean).cwiseAbs2();
    var /= n;
    StandardizationParams params;
    params.mean = mean;
    for (int c = 0; c < 2; ++c) {
        const double sd = std::sqrt(var[c]);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean[c])))) {
            throw ZeroVariance(std::string(c == 0 ? "speed" : "acceleration") + " channel is constant");
        }
        params.std[c] = sd;
    }
    std::vector<Vec2> out;
    out.reserve(samples.size());
    for (const auto& x : samples) out.push_back(params.apply(x));
    return {std::move(out), params};
}

inline std::vector<Vec2> unstandardize(std::span<const Vec2> z, const StandardizationParams& params) {
    std::vector<Vec2> out;
    out.reserve(z.size());
    for (const auto& x : z) out.push_back(params.invert(x));
    return out;
}

}  // namespace dpe

#endif  // DPE_INGEST_HPP
