#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace synergen {

enum class Action { click, purchase, add_to_cart, impression };

const char* action_name(Action a);
Action action_from_name(const std::string& s);

// One timestamped user interaction.
struct Event {
    std::string user_id;
    int64_t event_id = 0;       // unique per interaction
    int64_t request_group = 0;  // one search/browse request, monotone per user
    int64_t t_unix = 0;
    int item_id = 0;
    Action action = Action::click;
    std::optional<int> query_id;  // absent => query-free event
    bool clicked = false;

    bool positive() const { return clicked && action != Action::impression; }
    bool operator==(const Event&) const = default;
};

struct Session {
    std::string user_id;
    std::vector<Event> events;

    bool operator==(const Session&) const = default;
};

// Leave-one-out assignment. Sessions absent from the map are train-only.
struct SplitSpec {
    struct Holdout {
        int valid_index = -1;  // position in Session::events
        int test_index = -1;
    };
    std::map<std::string, Holdout> by_user;
};

std::vector<Session> load_events(const std::string& path);
void write_events(const std::string& path, const std::vector<Session>& sessions);

// Iterated removal of users and items with fewer than n interactions, to a
// fixed point.
std::vector<Session> filter_min_interactions(std::vector<Session> sessions, int n = 5);

// Test = last positive event, valid = second-to-last positive. Sessions with
// fewer than three positives contribute to training only.
SplitSpec leave_one_out_split(const std::vector<Session>& sessions);

// Optional preprocessing: split each user's history into weekly sub-sessions
// keeping the final max_events of each week.
std::vector<Session> segment_weekly(const std::vector<Session>& sessions, int max_events = 100);

// Synthetic corpus specification. Two learnable signals are planted: a
// query-free sequential rule item i -> (i+1) mod V, and queries that
// deterministically select one item out of a fixed cluster. `noise` replaces
// that fraction of browse clicks with random items. Each click gets
// impressed-but-not-clicked sibling events as hard negatives.
struct SynthSpec {
    int users = 100;
    int catalog_size = 200;
    int query_vocab = 20;
    int requests_per_user = 30;
    double search_fraction = 0.3;
    int impressions_per_click = 2;
    double noise = 0.05;
    int64_t start_time = 1700000000;
    std::vector<int64_t> gap_seconds = {3600};
    // When set, the next browse item is (prev + 1 + gap_index * delta_step)
    // mod V, so the target depends on the time gap to the previous event.
    bool time_sensitive = false;
    int delta_step = 12;
    int n_clusters = 20;
    int d_item_semantic = 128;
    int d_query_semantic = 256;

    void validate() const;
};

SynthSpec synth_spec_from_json_file(const std::string& path);

std::vector<Session> synth_generate(const SynthSpec& spec, uint64_t seed);

// The item a noise-free generator would emit for a browse step.
int planted_next_item(const SynthSpec& spec, int prev_item, int gap_index);
// The item a noise-free generator would emit for query q.
int planted_query_item(const SynthSpec& spec, int query_id);
// All items in query q's cluster.
std::vector<int> query_cluster_items(const SynthSpec& spec, int query_id);

}  // namespace synergen
