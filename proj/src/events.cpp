#include "synergen/events.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "synergen/rng.hpp"

namespace synergen {

const char* action_name(Action a) {
    switch (a) {
        case Action::click: return "click";
        case Action::purchase: return "purchase";
        case Action::add_to_cart: return "add_to_cart";
        case Action::impression: return "impression";
    }
    throw std::invalid_argument("unknown action");
}

Action action_from_name(const std::string& s) {
    if (s == "click") return Action::click;
    if (s == "purchase") return Action::purchase;
    if (s == "add_to_cart") return Action::add_to_cart;
    if (s == "impression") return Action::impression;
    throw std::invalid_argument("unknown action '" + s + "'");
}

std::vector<Session> load_events(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open event log " + path);

    std::map<std::string, Session> by_user;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": parse error: " + e.what());
        }
        Event e;
        try {
            e.user_id = j.at("user_id").get<std::string>();
            e.event_id = j.at("event_id").get<int64_t>();
            e.request_group = j.at("request_group").get<int64_t>();
            e.t_unix = j.at("t_unix").get<int64_t>();
            e.item_id = j.at("item_id").get<int>();
            e.action = action_from_name(j.at("action").get<std::string>());
            if (j.contains("query_id") && !j["query_id"].is_null()) e.query_id = j["query_id"].get<int>();
            e.clicked = j.at("clicked").get<bool>();
        } catch (const std::exception& ex) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad record: " + ex.what());
        }
        if (e.action == Action::impression && e.clicked)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": impression event marked clicked");

        Session& s = by_user[e.user_id];
        s.user_id = e.user_id;
        if (!s.events.empty()) {
            const Event& prev = s.events.back();
            if (std::make_pair(e.t_unix, e.event_id) <= std::make_pair(prev.t_unix, prev.event_id))
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": ordering violation for user " + e.user_id +
                                         " (events must be strictly increasing by (t_unix, event_id))");
            if (e.request_group < prev.request_group)
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": request_group decreases for user " + e.user_id);
        }
        s.events.push_back(std::move(e));
    }

    std::vector<Session> out;
    out.reserve(by_user.size());
    for (auto& [_, s] : by_user) out.push_back(std::move(s));
    return out;
}

void write_events(const std::string& path, const std::vector<Session>& sessions) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write event log " + path);
    for (const Session& s : sessions) {
        for (const Event& e : s.events) {
            nlohmann::ordered_json j;
            j["user_id"] = e.user_id;
            j["event_id"] = e.event_id;
            j["request_group"] = e.request_group;
            j["t_unix"] = e.t_unix;
            j["item_id"] = e.item_id;
            j["action"] = action_name(e.action);
            if (e.query_id) j["query_id"] = *e.query_id;
            j["clicked"] = e.clicked;
            out << j.dump() << "\n";
        }
    }
}

std::vector<Session> filter_min_interactions(std::vector<Session> sessions, int n) {
    if (n < 1) throw std::invalid_argument("filter_min_interactions: n must be >= 1");
    bool changed = true;
    while (changed) {
        changed = false;
        std::map<int, int> item_count;
        for (const Session& s : sessions)
            for (const Event& e : s.events) ++item_count[e.item_id];

        for (Session& s : sessions) {
            auto it = std::remove_if(s.events.begin(), s.events.end(),
                                     [&](const Event& e) { return item_count[e.item_id] < n; });
            if (it != s.events.end()) {
                s.events.erase(it, s.events.end());
                changed = true;
            }
        }
        size_t before = sessions.size();
        sessions.erase(std::remove_if(sessions.begin(), sessions.end(),
                                      [&](const Session& s) { return static_cast<int>(s.events.size()) < n; }),
                       sessions.end());
        if (sessions.size() != before) changed = true;
    }
    return sessions;
}

SplitSpec leave_one_out_split(const std::vector<Session>& sessions) {
    SplitSpec split;
    for (const Session& s : sessions) {
        std::vector<int> positives;
        for (int i = 0; i < static_cast<int>(s.events.size()); ++i)
            if (s.events[i].positive()) positives.push_back(i);
        if (positives.size() < 3) continue;  // train-only
        SplitSpec::Holdout h;
        h.test_index = positives[positives.size() - 1];
        h.valid_index = positives[positives.size() - 2];
        split.by_user[s.user_id] = h;
    }
    return split;
}

std::vector<Session> segment_weekly(const std::vector<Session>& sessions, int max_events) {
    constexpr int64_t kWeek = 7 * 24 * 3600;
    std::vector<Session> out;
    for (const Session& s : sessions) {
        std::map<int64_t, Session> weeks;
        for (const Event& e : s.events) {
            int64_t w = e.t_unix / kWeek;
            Session& sub = weeks[w];
            sub.user_id = s.user_id + "#w" + std::to_string(w);
            sub.events.push_back(e);
        }
        for (auto& [_, sub] : weeks) {
            if (static_cast<int>(sub.events.size()) > max_events)
                sub.events.erase(sub.events.begin(), sub.events.end() - max_events);
            if (sub.events.size() >= 2) out.push_back(std::move(sub));
        }
    }
    return out;
}

void SynthSpec::validate() const {
    if (users < 1 || catalog_size < 2 || query_vocab < 1 || requests_per_user < 1)
        throw std::invalid_argument("synth spec: counts must be positive");
    if (search_fraction < 0.0 || search_fraction > 1.0) throw std::invalid_argument("synth spec: bad search_fraction");
    if (noise < 0.0 || noise > 1.0) throw std::invalid_argument("synth spec: bad noise");
    if (impressions_per_click < 0) throw std::invalid_argument("synth spec: bad impressions_per_click");
    if (gap_seconds.empty()) throw std::invalid_argument("synth spec: gap_seconds empty");
    if (n_clusters < 1 || n_clusters > catalog_size) throw std::invalid_argument("synth spec: bad n_clusters");
    if (d_item_semantic < 1 || d_query_semantic < 1) throw std::invalid_argument("synth spec: bad embedding dims");
}

SynthSpec synth_spec_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open synth spec " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        throw std::runtime_error("synth spec " + path + ": " + e.what());
    }
    static const std::set<std::string> known = {
        "users", "catalog_size", "query_vocab", "requests_per_user", "search_fraction",
        "impressions_per_click", "noise", "start_time", "gap_seconds", "time_sensitive",
        "delta_step", "n_clusters", "d_item_semantic", "d_query_semantic"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw std::runtime_error("synth spec: unknown key '" + it.key() + "'");

    SynthSpec s;
    if (j.contains("users")) s.users = j["users"];
    if (j.contains("catalog_size")) s.catalog_size = j["catalog_size"];
    if (j.contains("query_vocab")) s.query_vocab = j["query_vocab"];
    if (j.contains("requests_per_user")) s.requests_per_user = j["requests_per_user"];
    if (j.contains("search_fraction")) s.search_fraction = j["search_fraction"];
    if (j.contains("impressions_per_click")) s.impressions_per_click = j["impressions_per_click"];
    if (j.contains("noise")) s.noise = j["noise"];
    if (j.contains("start_time")) s.start_time = j["start_time"];
    if (j.contains("gap_seconds")) s.gap_seconds = j["gap_seconds"].get<std::vector<int64_t>>();
    if (j.contains("time_sensitive")) s.time_sensitive = j["time_sensitive"];
    if (j.contains("delta_step")) s.delta_step = j["delta_step"];
    if (j.contains("n_clusters")) s.n_clusters = j["n_clusters"];
    if (j.contains("d_item_semantic")) s.d_item_semantic = j["d_item_semantic"];
    if (j.contains("d_query_semantic")) s.d_query_semantic = j["d_query_semantic"];
    s.validate();
    return s;
}

int planted_next_item(const SynthSpec& spec, int prev_item, int gap_index) {
    int delta = spec.time_sensitive ? 1 + gap_index * spec.delta_step : 1;
    return (prev_item + delta) % spec.catalog_size;
}

std::vector<int> query_cluster_items(const SynthSpec& spec, int query_id) {
    int cluster = query_id % spec.n_clusters;
    std::vector<int> items;
    for (int i = cluster; i < spec.catalog_size; i += spec.n_clusters) items.push_back(i);
    return items;
}

int planted_query_item(const SynthSpec& spec, int query_id) {
    auto items = query_cluster_items(spec, query_id);
    return items[(query_id / spec.n_clusters) % items.size()];
}

std::vector<Session> synth_generate(const SynthSpec& spec, uint64_t seed) {
    spec.validate();
    std::vector<Session> out;
    out.reserve(spec.users);
    for (int u = 0; u < spec.users; ++u) {
        auto rng = make_engine(seed, "synth.user", static_cast<uint64_t>(u));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::uniform_int_distribution<int> any_item(0, spec.catalog_size - 1);
        std::uniform_int_distribution<int> any_query(0, spec.query_vocab - 1);
        std::uniform_int_distribution<size_t> any_gap(0, spec.gap_seconds.size() - 1);

        Session session;
        session.user_id = "u" + std::to_string(u);
        int last = any_item(rng);
        int64_t t = spec.start_time + static_cast<int64_t>(u) * 977;
        int64_t eid = static_cast<int64_t>(u) * 1000000;

        for (int r = 0; r < spec.requests_per_user; ++r) {
            const int gap_index = static_cast<int>(any_gap(rng));
            t += spec.gap_seconds[gap_index];

            const bool is_search = unit(rng) < spec.search_fraction;
            std::optional<int> query;
            int item;
            std::vector<int> impressions;
            if (is_search) {
                const int q = any_query(rng);
                query = q;
                auto members = query_cluster_items(spec, q);
                // queries resolve deterministically; noise perturbs only the
                // sequential browse rule
                item = planted_query_item(spec, q);
                // impressions: other cluster members shown for the query
                std::vector<int> others;
                for (int m : members)
                    if (m != item) others.push_back(m);
                std::shuffle(others.begin(), others.end(), rng);
                for (int i = 0; i < spec.impressions_per_click && i < static_cast<int>(others.size()); ++i)
                    impressions.push_back(others[i]);
            } else {
                const int target = planted_next_item(spec, last, gap_index);
                item = unit(rng) < spec.noise ? any_item(rng) : target;
                std::set<int> chosen;
                while (static_cast<int>(chosen.size()) < spec.impressions_per_click &&
                       static_cast<int>(chosen.size()) < spec.catalog_size - 1) {
                    int cand = any_item(rng);
                    if (cand != item) chosen.insert(cand);
                }
                impressions.assign(chosen.begin(), chosen.end());
            }

            Event pos;
            pos.user_id = session.user_id;
            pos.event_id = eid++;
            pos.request_group = r;
            pos.t_unix = t;
            pos.item_id = item;
            pos.action = unit(rng) < 0.1 ? Action::purchase : Action::click;
            pos.query_id = query;
            pos.clicked = true;
            session.events.push_back(pos);

            for (int imp : impressions) {
                Event e;
                e.user_id = session.user_id;
                e.event_id = eid++;
                e.request_group = r;
                e.t_unix = t;
                e.item_id = imp;
                e.action = Action::impression;
                e.query_id = query;
                e.clicked = false;
                session.events.push_back(e);
            }
            last = item;
        }
        out.push_back(std::move(session));
    }
    return out;
}

}  // namespace synergen
