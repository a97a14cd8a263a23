#pragma once

// Deterministic synthetic LiDAR sequences: a street scene of boxes and spheres,
// surface-sampled with range-dependent density, with visibility culling so thin
// objects behind others are partially hidden in any single frame.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfseg/geometry.hpp"
#include "mfseg/lfe.hpp"

namespace mfseg::synth {

enum class SemanticClass : std::uint16_t { kGround = 0, kBuilding, kCar, kPedestrian, kCyclist, kVegetation };

inline constexpr std::size_t kNumClasses = 6;
inline const std::array<std::string, kNumClasses> kClassNames{"ground",     "building", "car",
                                                              "pedestrian", "cyclist",  "vegetation"};

/// Pedestrian and cyclist.
inline const std::vector<std::size_t> kVulnerableClasses{3, 4};

enum class Shape : std::uint8_t { kBox, kSphere };

struct SceneObject {
    SemanticClass cls = SemanticClass::kCar;
    Shape shape = Shape::kBox;
    Vec3 position = Vec3::Zero();  // box: footprint center at base height; sphere: center
    Vec3 extents = Vec3::Ones();   // box: length, width, height; sphere: radius in x
    double yaw = 0.0;
    Vec3 velocity = Vec3::Zero();  // m/s, world frame
};

struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t frames = 5;
    double frame_period = 0.1;     // s
    double ego_speed = 10.0;       // m/s
    double yaw_rate = 0.0;         // rad/s
    double sensor_height = 1.8;    // m
    std::vector<SceneObject> objects;  // empty: random street layout drawn from the seed
    std::size_t points_per_frame = 4000;
    double noise_sigma = 0.02;     // m
    bool occlusion = true;
    double max_range = 40.0;       // m

    void validate() const {
        if (frames < 1) throw std::invalid_argument("scene: frames must be >= 1");
        if (points_per_frame < 1) throw std::invalid_argument("scene: points budget must be >= 1");
        if (!(noise_sigma >= 0.0)) throw std::invalid_argument("scene: noise sigma must be >= 0");
        if (!(frame_period > 0.0) || !(max_range > 0.0)) throw std::invalid_argument("scene: bad timing or range");
    }
};

namespace detail {

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace detail

/// Random street: buildings along both sides, parked and moving cars, pedestrians
/// on the sidewalks (often behind parked cars), cyclists in bike lanes, trees and bushes.
inline std::vector<SceneObject> random_layout(std::uint64_t seed) {
    std::mt19937_64 rng(detail::mix(seed, 0xA11));
    auto U = [&](double lo, double hi) { return detail::uniform(rng, lo, hi); };
    std::vector<SceneObject> objs;
    for (int side : {-1, 1}) {
        for (double x = -45.0; x < 70.0;) {
            const double len = U(8.0, 20.0), depth = U(6.0, 10.0);
            const double setback = U(10.0, 13.0);
            objs.push_back({SemanticClass::kBuilding, Shape::kBox, {x + len / 2, side * (setback + depth / 2), 0.0},
                            {len, depth, U(5.0, 15.0)}, 0.0, Vec3::Zero()});
            x += len + U(0.0, 4.0);
        }
        for (double x = U(-30.0, -20.0); x < 60.0; x += U(6.0, 16.0)) {
            objs.push_back({SemanticClass::kCar, Shape::kBox, {x, side * U(3.9, 4.4), 0.0},
                            {U(4.0, 4.8), U(1.7, 1.9), U(1.4, 1.7)}, U(-0.05, 0.05), Vec3::Zero()});
        }
        for (double x = U(-30.0, -26.0); x < 60.0; x += U(2.0, 5.0)) {
            const double v = U(-1.4, 1.4);
            objs.push_back({SemanticClass::kPedestrian, Shape::kBox, {x, side * U(5.6, 7.6), 0.0},
                            {U(0.45, 0.65), U(0.45, 0.6), U(1.55, 1.9)}, v >= 0 ? 0.0 : std::numbers::pi,
                            {v, 0.0, 0.0}});
        }
        for (double x = U(-30.0, -15.0); x < 60.0; x += U(12.0, 24.0)) {
            const double v = side * U(2.0, 5.0);
            objs.push_back({SemanticClass::kCyclist, Shape::kBox, {x, side * U(2.6, 3.2), 0.0},
                            {U(1.6, 1.85), U(0.5, 0.65), U(1.6, 1.8)}, v >= 0 ? 0.0 : std::numbers::pi,
                            {v, 0.0, 0.0}});
        }
        for (double x = U(-30.0, -20.0); x < 60.0; x += U(7.0, 15.0)) {
            const double y = side * U(8.0, 9.3), trunk = U(1.8, 2.8), r = U(1.2, 2.2);
            objs.push_back({SemanticClass::kVegetation, Shape::kBox, {x, y, 0.0}, {0.3, 0.3, trunk}, 0.0, Vec3::Zero()});
            objs.push_back({SemanticClass::kVegetation, Shape::kSphere, {x, y, trunk + 0.6 * r}, {r, r, r}, 0.0,
                            Vec3::Zero()});
            if (U(0.0, 1.0) < 0.5) {
                const double br = U(0.5, 0.9);
                objs.push_back({SemanticClass::kVegetation, Shape::kSphere, {x + U(2.0, 3.5), y, 0.3}, {br, br, br},
                                0.0, Vec3::Zero()});
            }
        }
    }
    // Moving traffic in the two center lanes.
    for (int lane : {-1, 1})
        for (double x = U(-30.0, -10.0); x < 60.0; x += U(18.0, 35.0))
            objs.push_back({SemanticClass::kCar, Shape::kBox, {x, lane * 1.7, 0.0}, {U(4.0, 4.8), 1.8, U(1.4, 1.7)},
                            lane > 0 ? 0.0 : std::numbers::pi, {lane * U(3.0, 8.0), 0.0, 0.0}});
    return objs;
}

/// Planar rectangle o + a*u + b*v, or a sphere, tagged with its class.
struct Surface {
    Shape shape = Shape::kBox;
    SemanticClass cls = SemanticClass::kGround;
    Vec3 origin = Vec3::Zero(), u = Vec3::Zero(), v = Vec3::Zero();
    double radius = 0.0;

    double area() const {
        return shape == Shape::kBox ? u.norm() * v.norm() : 4.0 * std::numbers::pi * radius * radius;
    }

    /// Closest distance from `p` to the surface.
    double distance(const Vec3& p) const {
        if (shape == Shape::kSphere) return std::max(std::abs((p - origin).norm() - radius), 1e-6);
        const Vec3 d = p - origin;
        const double a = std::clamp(d.dot(u) / u.squaredNorm(), 0.0, 1.0);
        const double b = std::clamp(d.dot(v) / v.squaredNorm(), 0.0, 1.0);
        return std::max((origin + a * u + b * v - p).norm(), 1e-6);
    }

    Vec3 sample(std::mt19937_64& rng) const {
        if (shape == Shape::kBox) return origin + detail::uniform(rng, 0.0, 1.0) * u + detail::uniform(rng, 0.0, 1.0) * v;
        const double z = detail::uniform(rng, -1.0, 1.0), phi = detail::uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
        return origin + radius * Vec3(s * std::cos(phi), s * std::sin(phi), z);
    }

    /// Smallest ray parameter in (0, limit) where origin + t*dir (|dir| = 1) hits the surface.
    std::optional<double> intersect(const Vec3& from, const Vec3& dir, double limit) const {
        if (shape == Shape::kSphere) {
            const Vec3 oc = from - origin;
            const double b = oc.dot(dir), c = oc.squaredNorm() - radius * radius;
            const double disc = b * b - c;
            if (disc < 0.0) return std::nullopt;
            const double sq = std::sqrt(disc);
            for (double t : {-b - sq, -b + sq})
                if (t > 1e-9 && t < limit) return t;
            return std::nullopt;
        }
        const Vec3 n = u.cross(v);
        const double denom = n.dot(dir);
        if (std::abs(denom) < 1e-12) return std::nullopt;
        const double t = n.dot(origin - from) / denom;
        if (!(t > 1e-9 && t < limit)) return std::nullopt;
        const Vec3 d = from + t * dir - origin;
        const double a = d.dot(u) / u.squaredNorm(), b = d.dot(v) / v.squaredNorm();
        if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0) return std::nullopt;
        return t;
    }
};

/// Four sides and the top of a yawed box.
inline std::vector<Surface> box_surfaces(const SceneObject& o, const Vec3& pos) {
    const Eigen::Matrix3d R = Eigen::AngleAxisd(o.yaw, Vec3::UnitZ()).toRotationMatrix();
    const Vec3 ex = R * Vec3(o.extents.x(), 0, 0), ey = R * Vec3(0, o.extents.y(), 0), ez(0, 0, o.extents.z());
    const Vec3 c0 = pos - 0.5 * ex - 0.5 * ey;  // bottom corner
    return {
        {Shape::kBox, o.cls, c0, ex, ez, 0.0},
        {Shape::kBox, o.cls, c0 + ey, ex, ez, 0.0},
        {Shape::kBox, o.cls, c0, ey, ez, 0.0},
        {Shape::kBox, o.cls, c0 + ex, ey, ez, 0.0},
        {Shape::kBox, o.cls, c0 + ez, ex, ey, 0.0},
    };
}

inline std::vector<Surface> scene_surfaces(const std::vector<SceneObject>& objects, double t) {
    std::vector<Surface> out;
    for (const auto& o : objects) {
        const Vec3 pos = o.position + o.velocity * t;
        if (o.shape == Shape::kSphere) {
            out.push_back({Shape::kSphere, o.cls, pos, Vec3::Zero(), Vec3::Zero(), o.extents.x()});
        } else {
            const auto faces = box_surfaces(o, pos);
            out.insert(out.end(), faces.begin(), faces.end());
        }
    }
    return out;
}

/// Sensor-to-world pose after `t` seconds of constant speed and yaw rate.
inline Pose ego_pose(const SceneSpec& spec, double t) {
    const double w = spec.yaw_rate, v = spec.ego_speed, yaw = w * t;
    Vec3 p;
    if (std::abs(w) < 1e-12)
        p = {v * t, 0.0, spec.sensor_height};
    else
        p = {v / w * std::sin(yaw), v / w * (1.0 - std::cos(yaw)), spec.sensor_height};
    return Pose::from_yaw(yaw, p);
}

/// Sampling density relative to area, min(1, (r0/r)^2).
inline double range_weight(double r) {
    constexpr double r0 = 1.0;
    return std::min(1.0, (r0 * r0) / (r * r));
}

/// Weighted area of a surface seen from `sensor` by midpoint quadrature.
inline double weighted_area(const Surface& s, const Vec3& sensor, int n) {
    double sum = 0.0;
    if (s.shape == Shape::kBox) {
        const double cell = s.area() / (n * n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const Vec3 p = s.origin + (i + 0.5) / n * s.u + (j + 0.5) / n * s.v;
                sum += range_weight((p - sensor).norm()) * cell;
            }
        return sum;
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 2 * n; ++j) {
            const double z0 = -1.0 + 2.0 * i / n, z1 = -1.0 + 2.0 * (i + 1) / n;
            const double phi = (j + 0.5) * std::numbers::pi / n;
            const double z = 0.5 * (z0 + z1), r = std::sqrt(std::max(0.0, 1.0 - z * z));
            const Vec3 p = s.origin + s.radius * Vec3(r * std::cos(phi), r * std::sin(phi), z);
            // Equal-area cells: zone area is 2*pi*R^2*(z1-z0), split in 2n.
            sum += range_weight((p - sensor).norm()) * (2.0 * std::numbers::pi * s.radius * s.radius * (z1 - z0)) / (2 * n);
        }
    return sum;
}

/// Weighted area of the ground disk of radius R around the sensor (closed form).
inline double ground_weighted_area(double h, double range) {
    return std::numbers::pi * std::log((range * range + h * h) / (h * h));
}

/// Ground samples: radius drawn so the density follows range_weight exactly.
inline Vec3 sample_ground(std::mt19937_64& rng, const Vec3& sensor, double range) {
    const double h2 = sensor.z() * sensor.z();
    const double l = std::log((range * range + h2) / h2);
    const double rho = std::sqrt(h2 * std::exp(detail::uniform(rng, 0.0, 1.0) * l) - h2);
    const double phi = detail::uniform(rng, 0.0, 2.0 * std::numbers::pi);
    return {sensor.x() + rho * std::cos(phi), sensor.y() + rho * std::sin(phi), 0.0};
}

inline bool visible(const Vec3& sensor, const Vec3& p, const std::vector<Surface>& surfaces) {
    const Vec3 d = p - sensor;
    const double r = d.norm();
    const Vec3 dir = d / r;
    const double limit = r - 0.05;
    for (const auto& s : surfaces)
        if (s.intersect(sensor, dir, limit)) return false;
    return true;
}

struct IntensityModel {
    double mean, spread;
};

inline IntensityModel intensity_model(SemanticClass c) {
    switch (c) {
        case SemanticClass::kGround: return {0.20, 0.08};
        case SemanticClass::kBuilding: return {0.40, 0.12};
        case SemanticClass::kCar: return {0.55, 0.18};
        case SemanticClass::kPedestrian: return {0.35, 0.12};
        case SemanticClass::kCyclist: return {0.38, 0.12};
        case SemanticClass::kVegetation: return {0.30, 0.10};
    }
    return {0.3, 0.1};
}

/// One frame. Candidates are drawn identically whether or not occlusion is on;
/// occlusion only removes candidates.
inline RawPointCloud generate_frame(const SceneSpec& spec, const std::vector<SceneObject>& objects, std::size_t index) {
    const double t = static_cast<double>(index) * spec.frame_period;
    const Pose pose = ego_pose(spec, t);
    const Vec3 sensor = pose.translation;
    const auto surfaces = scene_surfaces(objects, t);
    std::mt19937_64 rng(detail::mix(spec.seed, 1000 + index));

    // Mixture over the ground and every surface, proportional to weighted area.
    std::vector<double> weights{ground_weighted_area(sensor.z(), spec.max_range)};
    std::vector<double> wmax{1.0};
    for (const auto& s : surfaces) {
        const double d = s.distance(sensor);
        weights.push_back(d > spec.max_range ? 0.0 : weighted_area(s, sensor, 8));
        wmax.push_back(range_weight(d));
    }
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> noise(0.0, 1.0);

    RawPointCloud cloud;
    cloud.pose = pose;
    cloud.capture_time = t;
    const Pose to_sensor = invert(pose);
    for (std::size_t k = 0; k < spec.points_per_frame; ++k) {
        Vec3 p;
        SemanticClass cls;
        const std::size_t si = pick(rng);
        if (si == 0) {
            p = sample_ground(rng, sensor, spec.max_range);
            cls = SemanticClass::kGround;
        } else {
            // Rejection within the picked surface, so its share stays proportional to its weighted area.
            const Surface& s = surfaces[si - 1];
            for (;;) {
                p = s.sample(rng);
                const double r = (p - sensor).norm();
                if (r <= spec.max_range && detail::uniform(rng, 0.0, 1.0) * wmax[si] < range_weight(r)) break;
            }
            cls = s.cls;
        }
        const IntensityModel im = intensity_model(cls);
        const double intensity = std::clamp(im.mean + im.spread * noise(rng), 0.0, 1.0);
        const Vec3 jitter(noise(rng), noise(rng), noise(rng));
        if (spec.occlusion && !visible(sensor, p, surfaces)) continue;
        const Vec3 local = to_sensor.apply(p + spec.noise_sigma * jitter);
        cloud.coords.push_back(local.cast<float>());
        cloud.intensity.push_back(static_cast<float>(intensity));
        cloud.timestamp.push_back(0.0f);
        cloud.labels.push_back(static_cast<std::uint16_t>(cls));
    }
    return cloud;
}

inline std::vector<RawPointCloud> generate(const SceneSpec& spec) {
    spec.validate();
    const auto objects = spec.objects.empty() ? random_layout(spec.seed) : spec.objects;
    std::vector<RawPointCloud> frames;
    frames.reserve(spec.frames);
    for (std::size_t i = 0; i < spec.frames; ++i) frames.push_back(generate_frame(spec, objects, i));
    return frames;
}

// ---------------------------------------------------------------------------
// Dataset spec: `sequences` scenes seeded first_seed, first_seed + 1, ...

struct DatasetSpec {
    std::size_t sequences = 200;
    std::uint64_t first_seed = 1000;
    SceneSpec scene;

    SceneSpec sequence(std::size_t i) const {
        SceneSpec s = scene;
        s.seed = first_seed + i;
        return s;
    }
};

namespace detail {

inline Vec3 vec3_from(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw std::invalid_argument("scene: expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
    for (const auto& [k, v] : j.items())
        if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; }))
            throw std::invalid_argument(std::string(what) + ": unknown key '" + k + "'");
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline std::optional<SemanticClass> class_from_name(const std::string& name) {
    for (std::size_t c = 0; c < kNumClasses; ++c)
        if (kClassNames[c] == name) return static_cast<SemanticClass>(c);
    return std::nullopt;
}

inline void to_json(nlohmann::json& j, const SceneObject& o) {
    j = {{"class", kClassNames[static_cast<std::size_t>(o.cls)]},
         {"shape", o.shape == Shape::kBox ? "box" : "sphere"},
         {"position", {o.position.x(), o.position.y(), o.position.z()}},
         {"extents", {o.extents.x(), o.extents.y(), o.extents.z()}},
         {"yaw", o.yaw},
         {"velocity", {o.velocity.x(), o.velocity.y(), o.velocity.z()}}};
}

inline void from_json(const nlohmann::json& j, SceneObject& o) {
    detail::reject_unknown(j, {"class", "shape", "position", "extents", "yaw", "velocity"}, "object");
    const auto cls = class_from_name(j.at("class").get<std::string>());
    if (!cls) throw std::invalid_argument("object: unknown class '" + j.at("class").get<std::string>() + "'");
    o.cls = *cls;
    const std::string shape = j.value("shape", "box");
    if (shape != "box" && shape != "sphere") throw std::invalid_argument("object: shape must be box or sphere");
    o.shape = shape == "box" ? Shape::kBox : Shape::kSphere;
    o.position = detail::vec3_from(j.at("position"));
    o.extents = detail::vec3_from(j.at("extents"));
    o.yaw = j.value("yaw", 0.0);
    o.velocity = j.contains("velocity") ? detail::vec3_from(j.at("velocity")) : Vec3::Zero();
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = {{"seed", s.seed},
         {"frames", s.frames},
         {"frame_period", s.frame_period},
         {"ego_speed", s.ego_speed},
         {"yaw_rate", s.yaw_rate},
         {"sensor_height", s.sensor_height},
         {"objects", s.objects},
         {"points_per_frame", s.points_per_frame},
         {"noise_sigma", s.noise_sigma},
         {"occlusion", s.occlusion},
         {"max_range", s.max_range}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
    detail::reject_unknown(j,
                           {"seed", "frames", "frame_period", "ego_speed", "yaw_rate", "sensor_height", "objects",
                            "points_per_frame", "noise_sigma", "occlusion", "max_range"},
                           "scene");
    detail::read_opt(j, "seed", s.seed);
    detail::read_opt(j, "frames", s.frames);
    detail::read_opt(j, "frame_period", s.frame_period);
    detail::read_opt(j, "ego_speed", s.ego_speed);
    detail::read_opt(j, "yaw_rate", s.yaw_rate);
    detail::read_opt(j, "sensor_height", s.sensor_height);
    detail::read_opt(j, "objects", s.objects);
    detail::read_opt(j, "points_per_frame", s.points_per_frame);
    detail::read_opt(j, "noise_sigma", s.noise_sigma);
    detail::read_opt(j, "occlusion", s.occlusion);
    detail::read_opt(j, "max_range", s.max_range);
    s.validate();
}

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
    j = {{"sequences", d.sequences}, {"first_seed", d.first_seed}, {"scene", d.scene}};
}

/// A bare scene object (no "scene" key) is accepted as a one-sequence dataset.
inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
    if (!j.contains("scene")) {
        d.sequences = 1;
        d.scene = j.get<SceneSpec>();
        d.first_seed = d.scene.seed;
        return;
    }
    detail::reject_unknown(j, {"sequences", "first_seed", "scene"}, "dataset");
    detail::read_opt(j, "sequences", d.sequences);
    detail::read_opt(j, "first_seed", d.first_seed);
    d.scene = j.at("scene").get<SceneSpec>();
    if (d.sequences < 1) throw std::invalid_argument("dataset: sequences must be >= 1");
}

}  // namespace mfseg::synth
