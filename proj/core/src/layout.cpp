#include "ssmg/layout.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace ssmg {

using nlohmann::json;

namespace {

void require_keys(const json& obj, std::initializer_list<const char*> keys, const char* where) {
    if (!obj.is_object()) throw SchemaError(std::string(where) + ": expected object");
    for (const char* k : keys)
        if (!obj.contains(k)) throw SchemaError(std::string(where) + ": missing field \"" + k + "\"");
    if (obj.size() != keys.size()) {
        for (auto it = obj.begin(); it != obj.end(); ++it) {
            bool known = false;
            for (const char* k : keys) known = known || it.key() == k;
            if (!known) throw SchemaError(std::string(where) + ": unknown field \"" + it.key() + "\"");
        }
    }
}

double get_number(const json& obj, const char* key, const char* where) {
    const auto& v = obj.at(key);
    if (!v.is_number()) throw SchemaError(std::string(where) + ": \"" + key + "\" must be a number");
    return v.get<double>();
}

int get_int(const json& obj, const char* key, const char* where) {
    const auto& v = obj.at(key);
    if (!v.is_number_integer())
        throw SchemaError(std::string(where) + ": \"" + key + "\" must be an integer");
    return v.get<int>();
}

std::string get_string(const json& obj, const char* key, const char* where) {
    const auto& v = obj.at(key);
    if (!v.is_string()) throw SchemaError(std::string(where) + ": \"" + key + "\" must be a string");
    return v.get<std::string>();
}

std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\n\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\n\r");
    return s.substr(a, b - a + 1);
}

Region parse_region(const json& r, int entity_id, std::vector<LayoutIssue>* issues) {
    const std::string where = "entity " + std::to_string(entity_id) + " region";
    if (!r.is_object() || !r.contains("type"))
        throw SchemaError(where + ": missing \"type\"");
    const std::string type = get_string(r, "type", where.c_str());

    if (type == "box") {
        require_keys(r, {"type", "xyxy"}, where.c_str());
        const auto& a = r.at("xyxy");
        if (!a.is_array() || a.size() != 4)
            throw SchemaError(where + ": \"xyxy\" must be [x0,y0,x1,y1]");
        BoxRegion b;
        b.x0 = a[0].get<double>();
        b.y0 = a[1].get<double>();
        b.x1 = a[2].get<double>();
        b.y1 = a[3].get<double>();
        if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
            throw ValueError(where + ": inverted or degenerate box");
        BoxRegion c = b;
        c.x0 = std::clamp(c.x0, 0.0, 1.0);
        c.x1 = std::clamp(c.x1, 0.0, 1.0);
        c.y0 = std::clamp(c.y0, 0.0, 1.0);
        c.y1 = std::clamp(c.y1, 0.0, 1.0);
        if (c != b && issues)
            issues->push_back({LayoutIssue::Severity::Warning, entity_id,
                               "box extended beyond the canvas and was clamped to [0,1]"});
        return c;
    }
    if (type == "mask") {
        require_keys(r, {"type", "h", "w", "rle"}, where.c_str());
        MaskRegion m;
        m.h = get_int(r, "h", where.c_str());
        m.w = get_int(r, "w", where.c_str());
        if (m.h < 1 || m.w < 1) throw ValueError(where + ": mask dimensions must be positive");
        const auto& rle = r.at("rle");
        if (!rle.is_array()) throw SchemaError(where + ": \"rle\" must be an array");
        m.grid.assign(static_cast<size_t>(m.h) * m.w, 0);
        size_t pos = 0;
        uint8_t bit = 0;  // runs start with zeros
        for (const auto& run_j : rle) {
            if (!run_j.is_number_integer() || run_j.get<int64_t>() < 0)
                throw SchemaError(where + ": rle runs must be non-negative integers");
            int64_t run = run_j.get<int64_t>();
            if (pos + static_cast<size_t>(run) > m.grid.size())
                throw ValueError(where + ": rle overruns the mask grid");
            std::fill_n(m.grid.begin() + static_cast<long>(pos), run, bit);
            pos += static_cast<size_t>(run);
            bit ^= 1;
        }
        if (pos != m.grid.size()) throw ValueError(where + ": rle does not cover the mask grid");
        if (std::find(m.grid.begin(), m.grid.end(), uint8_t(1)) == m.grid.end())
            throw ValueError(where + ": empty mask");
        return m;
    }
    if (type == "keypoints") {
        require_keys(r, {"type", "pts", "radius"}, where.c_str());
        KeypointsRegion k;
        k.radius = get_number(r, "radius", where.c_str());
        if (!(k.radius > 0)) throw ValueError(where + ": radius must be positive");
        const auto& pts = r.at("pts");
        if (!pts.is_array() || pts.empty())
            throw ValueError(where + ": keypoints must be a non-empty array");
        for (const auto& p : pts) {
            if (!p.is_array() || p.size() != 2)
                throw SchemaError(where + ": each point must be [x,y]");
            k.pts.emplace_back(p[0].get<double>(), p[1].get<double>());
        }
        return k;
    }
    throw SchemaError(where + ": unknown region type \"" + type + "\"");
}

json region_to_json(const Region& region) {
    json r;
    if (const auto* b = std::get_if<BoxRegion>(&region)) {
        r["type"] = "box";
        r["xyxy"] = {b->x0, b->y0, b->x1, b->y1};
    } else if (const auto* m = std::get_if<MaskRegion>(&region)) {
        r["type"] = "mask";
        r["h"] = m->h;
        r["w"] = m->w;
        json rle = json::array();
        uint8_t bit = 0;
        int64_t run = 0;
        for (uint8_t v : m->grid) {
            if (v == bit) {
                ++run;
            } else {
                rle.push_back(run);
                bit = v;
                run = 1;
            }
        }
        rle.push_back(run);
        r["rle"] = rle;
    } else {
        const auto& k = std::get<KeypointsRegion>(region);
        r["type"] = "keypoints";
        json pts = json::array();
        for (const auto& [x, y] : k.pts) pts.push_back({x, y});
        r["pts"] = pts;
        r["radius"] = k.radius;
    }
    return r;
}

}  // namespace

Layout parse_layout(const std::string& json_bytes, const ParseOptions& opts,
                    std::vector<LayoutIssue>* issues) {
    json doc;
    try {
        doc = json::parse(json_bytes);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("layout: not valid JSON: ") + e.what());
    }
    require_keys(doc, {"entities", "global", "h", "w"}, "layout");

    Layout layout;
    layout.global_desc = get_string(doc, "global", "layout");
    layout.canvas_h = get_int(doc, "h", "layout");
    layout.canvas_w = get_int(doc, "w", "layout");
    if (layout.canvas_h < 1 || layout.canvas_w < 1)
        throw ValueError("layout: canvas dimensions must be positive");

    const auto& ents = doc.at("entities");
    if (!ents.is_array()) throw SchemaError("layout: \"entities\" must be an array");
    if (static_cast<int>(ents.size()) > opts.max_entities)
        throw ValueError("layout: more than " + std::to_string(opts.max_entities) + " entities");

    int next_id = 0;
    for (const auto& e : ents) {
        require_keys(e, {"id", "desc", "region"}, "entity");
        Entity ent;
        ent.id = get_int(e, "id", "entity");
        if (ent.id != next_id)
            throw ValueError("layout: entity ids must be dense 0..n-1 in order (got " +
                             std::to_string(ent.id) + " at position " + std::to_string(next_id) + ")");
        ++next_id;
        ent.desc = get_string(e, "desc", "entity");
        if (trimmed(ent.desc).empty())
            throw ValueError("entity " + std::to_string(ent.id) + ": description must be non-empty");
        ent.region = parse_region(e.at("region"), ent.id, issues);
        layout.entities.push_back(std::move(ent));
    }

    // Every entity must cover at least one pixel at canvas resolution.
    for (const Entity& ent : layout.entities) {
        try {
            rasterize(ent.region, layout.canvas_h, layout.canvas_w);
        } catch (const EmptyCoverage&) {
            throw ValueError("entity " + std::to_string(ent.id) +
                             ": covers no pixel at canvas resolution");
        }
    }
    return layout;
}

std::string serialize_layout(const Layout& layout) {
    json doc;
    json ents = json::array();
    for (const Entity& e : layout.entities) {
        json je;
        je["id"] = e.id;
        je["desc"] = e.desc;
        je["region"] = region_to_json(e.region);
        ents.push_back(je);
    }
    doc["entities"] = ents;
    doc["global"] = layout.global_desc;
    doc["h"] = layout.canvas_h;
    doc["w"] = layout.canvas_w;
    return doc.dump();
}

CoverageMask rasterize(const Region& region, int h, int w) {
    if (h < 1 || w < 1) throw RangeError("rasterize: resolution must be positive");
    CoverageMask mask(h, w);
    int set = 0;
    for (int i = 0; i < h; ++i) {
        const double cy = (i + 0.5) / h;
        for (int j = 0; j < w; ++j) {
            const double cx = (j + 0.5) / w;
            bool inside = false;
            if (const auto* b = std::get_if<BoxRegion>(&region)) {
                inside = cx >= b->x0 && cx <= b->x1 && cy >= b->y0 && cy <= b->y1;
            } else if (const auto* m = std::get_if<MaskRegion>(&region)) {
                int sx = std::clamp(static_cast<int>(cx * m->w), 0, m->w - 1);
                int sy = std::clamp(static_cast<int>(cy * m->h), 0, m->h - 1);
                inside = m->grid[static_cast<size_t>(sy) * m->w + sx] != 0;
            } else {
                const auto& k = std::get<KeypointsRegion>(region);
                const double r2 = k.radius * k.radius;
                for (const auto& [px, py] : k.pts) {
                    const double dx = cx - px, dy = cy - py;
                    if (dx * dx + dy * dy <= r2) {
                        inside = true;
                        break;
                    }
                }
            }
            if (inside) {
                mask.at(i, j) = 1;
                ++set;
            }
        }
    }
    if (set == 0) throw EmptyCoverage("rasterize: region covers no pixel at " + std::to_string(h) +
                                      "x" + std::to_string(w));
    return mask;
}

std::vector<LayoutIssue> validate(const Layout& layout, int h, int w) {
    std::vector<LayoutIssue> issues;
    const double total = static_cast<double>(h) * w;
    for (const Entity& e : layout.entities) {
        try {
            CoverageMask m = rasterize(e.region, h, w);
            const double frac = m.count() / total;
            if (frac < 0.02)
                issues.push_back({LayoutIssue::Severity::Warning, e.id,
                                  "entity covers less than 2% of pixels at " + std::to_string(h) +
                                      "x" + std::to_string(w)});
        } catch (const EmptyCoverage&) {
            issues.push_back({LayoutIssue::Severity::Error, e.id,
                              "entity covers no pixel at " + std::to_string(h) + "x" +
                                  std::to_string(w)});
        }
    }
    return issues;
}

}  // namespace ssmg
