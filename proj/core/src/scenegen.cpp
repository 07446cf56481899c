#include "htcn/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "htcn/boxes.hpp"

namespace htcn {

const char* class_name(int cls) {
    switch (cls) {
        case 0: return "square";
        case 1: return "circle";
        case 2: return "triangle";
        default: tensor_fail("class id " + std::to_string(cls) + " outside [0,3)");
    }
}

namespace {

struct PlacedObject {
    Box box;
    int cls;
    double r, g, b;
};

// Class-correlated colors: hue identifies the class, brightness varies per
// instance. Keeps the classification task learnable by a very small net.
void sample_color(int cls, Pcg32& rng, double& r, double& g, double& b) {
    double hi = rng.uniform(0.65, 0.95);
    double lo1 = rng.uniform(0.05, 0.30);
    double lo2 = rng.uniform(0.05, 0.30);
    switch (cls) {
        case 0: r = hi; g = lo1; b = lo2; break;
        case 1: r = lo1; g = hi; b = lo2; break;
        default: r = lo1; g = lo2; b = hi; break;
    }
}

void paint(std::vector<double>& img, int size, int x, int y, double r, double g, double b) {
    std::size_t idx = static_cast<std::size_t>(y) * size + x;
    std::size_t plane = static_cast<std::size_t>(size) * size;
    img[idx] = r;
    img[plane + idx] = g;
    img[2 * plane + idx] = b;
}

void rasterize(std::vector<double>& img, int size, const PlacedObject& obj) {
    int x_lo = static_cast<int>(std::floor(obj.box.x1));
    int y_lo = static_cast<int>(std::floor(obj.box.y1));
    int x_hi = static_cast<int>(std::ceil(obj.box.x2));
    int y_hi = static_cast<int>(std::ceil(obj.box.y2));
    x_lo = std::max(x_lo, 0);
    y_lo = std::max(y_lo, 0);
    x_hi = std::min(x_hi, size);
    y_hi = std::min(y_hi, size);
    double w = box_width(obj.box), h = box_height(obj.box);
    double cx = obj.box.x1 + 0.5 * w, cy = obj.box.y1 + 0.5 * h;
    for (int y = y_lo; y < y_hi; ++y) {
        for (int x = x_lo; x < x_hi; ++x) {
            // Pixel-center inside test; exact f64 arithmetic, no blending.
            double px = x + 0.5, py = y + 0.5;
            bool inside = false;
            switch (obj.cls) {
                case 0:
                    inside = px >= obj.box.x1 && px < obj.box.x2 && py >= obj.box.y1 &&
                             py < obj.box.y2;
                    break;
                case 1: {
                    double dx = (px - cx) / (0.5 * w);
                    double dy = (py - cy) / (0.5 * h);
                    inside = dx * dx + dy * dy <= 1.0;
                    break;
                }
                default: {
                    // Apex at top center, base along the bottom edge.
                    if (py < obj.box.y1 || py > obj.box.y2) break;
                    double t = (py - obj.box.y1) / h;  // 0 at apex row, 1 at base
                    double half = 0.5 * w * t;
                    inside = px >= cx - half && px <= cx + half;
                    break;
                }
            }
            if (inside) paint(img, size, x, y, obj.r, obj.g, obj.b);
        }
    }
}

}  // namespace

LabeledScene generate_scene(const SceneSpec& spec, std::uint64_t index) {
    if (spec.image_size < 32) tensor_fail("scene: image size below 32");
    if (spec.min_objects < 1 || spec.max_objects < spec.min_objects) {
        tensor_fail("scene: bad object count range");
    }
    Pcg32 rng(derive_seed(spec.seed, "scene", index));
    int size = spec.image_size;
    std::size_t plane = static_cast<std::size_t>(size) * size;
    std::vector<double> img(3 * plane);

    // Flat background, identical palette in both domains: the fog transform
    // is the only systematic domain difference.
    double bg_r = rng.uniform(0.12, 0.38);
    double bg_g = rng.uniform(0.12, 0.38);
    double bg_b = rng.uniform(0.12, 0.38);
    for (std::size_t i = 0; i < plane; ++i) {
        img[i] = bg_r;
        img[plane + i] = bg_g;
        img[2 * plane + i] = bg_b;
    }

    int want = spec.min_objects +
               static_cast<int>(rng.next_below(
                   static_cast<std::uint32_t>(spec.max_objects - spec.min_objects + 1)));
    std::vector<PlacedObject> placed;
    LabeledScene scene;
    for (int obj_i = 0; obj_i < want; ++obj_i) {
        // Deterministic retry stream; give up on a crowded canvas rather
        // than loop forever (the first object always fits).
        bool ok = false;
        for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
            int cls = static_cast<int>(rng.next_below(kNumClasses));
            double w = rng.uniform(spec.min_scale, spec.max_scale);
            // Near-square boxes keep every object matchable by square anchors.
            double h = std::min(std::max(w * rng.uniform(0.8, 1.25), spec.min_scale),
                                spec.max_scale);
            double x1 = rng.uniform(1.0, size - 1.0 - w);
            double y1 = rng.uniform(1.0, size - 1.0 - h);
            Box box{x1, y1, x1 + w, y1 + h};
            bool overlaps = false;
            for (const auto& p : placed) {
                if (iou(box, p.box) > 0.3) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) continue;
            PlacedObject po;
            po.box = box;
            po.cls = cls;
            sample_color(cls, rng, po.r, po.g, po.b);
            placed.push_back(po);
            ok = true;
        }
    }
    for (const auto& p : placed) {
        rasterize(img, size, p);
        scene.labels.push_back({p.box, p.cls});
    }
    scene.image = Tensor::from_values({3, size, size}, std::move(img), false);
    return scene;
}

Tensor fog_transform(const Tensor& image, const FogParams& fog, double alpha, Pcg32& noise_rng) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        tensor_fail("fog: expects [3,H,W] image, got " + shape_str(image.shape()));
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) tensor_fail("fog: alpha outside [0,1]");
    int h = image.dim(1), w = image.dim(2);
    std::size_t plane = static_cast<std::size_t>(h) * w;
    const auto& src = image.values();
    std::vector<double> out(src.size());

    int r = fog.blur_radius;
    for (int c = 0; c < 3; ++c) {
        const double* in_plane = src.data() + static_cast<std::size_t>(c) * plane;
        double* out_plane = out.data() + static_cast<std::size_t>(c) * plane;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double blurred;
                if (r > 0) {
                    double acc = 0.0;
                    int count = 0;
                    for (int dy = -r; dy <= r; ++dy) {
                        int yy = y + dy;
                        if (yy < 0 || yy >= h) continue;
                        for (int dx = -r; dx <= r; ++dx) {
                            int xx = x + dx;
                            if (xx < 0 || xx >= w) continue;
                            acc += in_plane[static_cast<std::size_t>(yy) * w + xx];
                            ++count;
                        }
                    }
                    blurred = acc / count;
                } else {
                    blurred = in_plane[static_cast<std::size_t>(y) * w + x];
                }
                out_plane[static_cast<std::size_t>(y) * w + x] =
                    (1.0 - alpha) * blurred + alpha * fog.gray;
            }
        }
    }
    if (fog.noise_sigma > 0.0) {
        for (auto& v : out) v += noise_rng.uniform(-fog.noise_sigma, fog.noise_sigma);
    }
    for (auto& v : out) v = std::min(std::max(v, 0.0), 1.0);
    return Tensor::from_values(image.shape(), std::move(out), false);
}

double sample_target_alpha(const SceneSpec& spec, std::uint64_t index) {
    Pcg32 rng(derive_seed(spec.seed, "fog-alpha-target", index));
    double mid = 0.5 * (spec.fog.alpha_lo + spec.fog.alpha_hi);
    return rng.uniform(mid, spec.fog.alpha_hi);
}

double sample_interp_alpha(const SceneSpec& spec, std::uint64_t index) {
    Pcg32 rng(derive_seed(spec.seed, "fog-alpha-interp", index));
    double mid = 0.5 * (spec.fog.alpha_lo + spec.fog.alpha_hi);
    return rng.uniform(spec.fog.alpha_lo, mid);
}

DomainBatch make_domain_batch(const SceneSpec& spec, std::uint64_t batch_index, int per_stream) {
    if (per_stream < 1) tensor_fail("batch: per_stream must be >= 1");
    DomainBatch batch;
    for (int i = 0; i < per_stream; ++i) {
        std::uint64_t src_index =
            batch_index * static_cast<std::uint64_t>(per_stream) + static_cast<std::uint64_t>(i);
        std::uint64_t tgt_index = kTargetIndexOffset + src_index;

        LabeledScene src = generate_scene(spec, src_index);
        LabeledScene tgt = generate_scene(spec, tgt_index);

        LabeledScene interp;
        interp.labels = src.labels;
        if (spec.fog.is_null()) {
            interp.image = src.image;
        } else {
            Pcg32 noise(derive_seed(spec.seed, "fog-noise-interp", src_index));
            interp.image =
                fog_transform(src.image, spec.fog, sample_interp_alpha(spec, src_index), noise);
        }

        UnlabeledScene fogged_target;
        if (spec.fog.is_null()) {
            fogged_target.image = tgt.image;
        } else {
            Pcg32 noise(derive_seed(spec.seed, "fog-noise-target", tgt_index));
            fogged_target.image =
                fog_transform(tgt.image, spec.fog, sample_target_alpha(spec, tgt_index), noise);
        }

        batch.source.push_back(std::move(src));
        batch.target_like_source.push_back(std::move(interp));
        batch.target.push_back(std::move(fogged_target));
        batch.source_like_target.push_back(UnlabeledScene{tgt.image});
    }
    return batch;
}

std::vector<LabeledScene> generate_eval_split(const SceneSpec& spec, int count,
                                              bool domain_fogged) {
    if (count < 1) tensor_fail("eval split: count must be >= 1");
    std::vector<LabeledScene> split;
    split.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        std::uint64_t index = kEvalIndexOffset + static_cast<std::uint64_t>(i);
        LabeledScene scene = generate_scene(spec, index);
        if (domain_fogged && !spec.fog.is_null()) {
            Pcg32 noise(derive_seed(spec.seed, "fog-noise-eval", index));
            scene.image =
                fog_transform(scene.image, spec.fog, sample_target_alpha(spec, index), noise);
        }
        split.push_back(std::move(scene));
    }
    return split;
}

namespace {

void write_ppm(const std::string& path, const Tensor& image) {
    int h = image.dim(1), w = image.dim(2);
    std::size_t plane = static_cast<std::size_t>(h) * w;
    std::ofstream out(path, std::ios::binary);
    if (!out) tensor_fail("cannot write " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    const auto& v = image.values();
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                double val = v[static_cast<std::size_t>(c) * plane +
                               static_cast<std::size_t>(y) * w + x];
                long q = std::lround(val * 255.0);
                row[static_cast<std::size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::min(255l, std::max(0l, q)));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

}  // namespace

std::string export_split(const SceneSpec& spec, const std::string& dir, const std::string& name,
                         int count, bool domain_fogged) {
    namespace fs = std::filesystem;
    fs::path split_dir = fs::path(dir) / name;
    fs::create_directories(split_dir);
    auto split = generate_eval_split(spec, count, domain_fogged);
    std::string labels_path = (split_dir / "labels.jsonl").string();
    std::ofstream labels(labels_path);
    if (!labels) tensor_fail("cannot write " + labels_path);
    char fname[64];
    for (int i = 0; i < count; ++i) {
        std::snprintf(fname, sizeof(fname), "%s_%05d.ppm", name.c_str(), i);
        write_ppm((split_dir / fname).string(), split[static_cast<std::size_t>(i)].image);
        labels << "{\"file\":\"" << fname << "\",\"boxes\":[";
        const auto& ls = split[static_cast<std::size_t>(i)].labels;
        for (std::size_t j = 0; j < ls.size(); ++j) {
            if (j) labels << ",";
            const Box& b = ls[j].box;
            labels << "[" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << "]";
        }
        labels << "],\"classes\":[";
        for (std::size_t j = 0; j < ls.size(); ++j) {
            if (j) labels << ",";
            labels << ls[j].cls;
        }
        labels << "]}\n";
    }
    return labels_path;
}

}  // namespace htcn
