#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "specsim/errors.hpp"

#include <json.hpp>

namespace specsim {

enum class WorkerState { Busy, Idle, Training };

inline const char* worker_state_name(WorkerState s) {
    switch (s) {
        case WorkerState::Busy: return "BUSY";
        case WorkerState::Idle: return "IDLE";
        case WorkerState::Training: return "TRAINING";
    }
    return "?";
}

inline WorkerState worker_state_from_name(const std::string& name) {
    if (name == "BUSY") return WorkerState::Busy;
    if (name == "IDLE") return WorkerState::Idle;
    if (name == "TRAINING") return WorkerState::Training;
    throw ProtocolError("unknown worker state: " + name);
}

struct WorkerRecord {
    int worker_id = 0;
    WorkerState state = WorkerState::Busy;
    int dp_group = 0;
};

enum class CoordActionType {
    StateChange,
    StartTraining,
    JoinTraining,
    Preempt,
    CheckpointRequest,
    RolloutDone,
};

inline const char* coord_action_name(CoordActionType t) {
    switch (t) {
        case CoordActionType::StateChange: return "STATE_CHANGE";
        case CoordActionType::StartTraining: return "START_TRAINING";
        case CoordActionType::JoinTraining: return "JOIN_TRAINING";
        case CoordActionType::Preempt: return "PREEMPT";
        case CoordActionType::CheckpointRequest: return "CHECKPOINT_REQUEST";
        case CoordActionType::RolloutDone: return "ROLLOUT_DONE";
    }
    return "?";
}

/// One message of the coordinator protocol, both inbound notifications and
/// outbound commands. Serialized as {type, worker_id, payload}.
struct CoordMessage {
    CoordActionType type = CoordActionType::StateChange;
    int worker_id = -1;
    nlohmann::json payload = nlohmann::json::object();

    nlohmann::json to_json() const {
        return {{"type", coord_action_name(type)}, {"worker_id", worker_id}, {"payload", payload}};
    }
};

/// Centralized worker coordinator. Workers cycle BUSY -> IDLE -> TRAINING
/// -> (IDLE | BUSY), with IDLE -> BUSY also legal. Once the idle count
/// reaches the threshold the lowest idle worker is elected leader of the
/// (single) training session; idle workers of the same data-parallel group
/// are invited to join. Rollout completion preempts every member and asks
/// the leader for one checkpoint.
///
/// All mutation happens through this single object (one consumer of the
/// message queue); methods return the outbound actions in emission order
/// and append both directions to the event log.
class Coordinator {
public:
    struct Session {
        int leader_id = -1;
        int dp_group = 0;
        std::set<int> members; // workers currently TRAINING in this session
        bool activated = false; // a member has joined at least once
    };

    Coordinator(const std::vector<WorkerRecord>& workers, int idle_threshold)
        : idle_threshold_(idle_threshold) {
        if (idle_threshold_ < 1) throw ConfigError("idle_threshold", "must be >= 1");
        for (const auto& w : workers) {
            if (workers_.count(w.worker_id))
                throw ConfigError("workers", "duplicate worker_id");
            workers_.emplace(w.worker_id, w);
        }
    }

    const std::map<int, WorkerRecord>& workers() const { return workers_; }
    const std::optional<Session>& session() const { return session_; }
    bool rollout_done() const { return rollout_done_; }
    const std::vector<CoordMessage>& event_log() const { return log_; }

    int idle_count() const {
        int n = 0;
        for (const auto& [id, w] : workers_) n += (w.state == WorkerState::Idle);
        return n;
    }

    /// Resets for a new rollout: no session may be live, every worker goes
    /// BUSY, rollout_done clears.
    void begin_rollout() {
        if (session_.has_value())
            throw ProtocolError("cannot begin rollout with a live training session");
        for (auto& [id, w] : workers_) w.state = WorkerState::Busy;
        rollout_done_ = false;
    }

    /// Applies a worker state notification and returns the actions it
    /// triggers. Illegal transitions throw ProtocolError naming both states.
    std::vector<CoordMessage> transition(int worker_id, WorkerState to) {
        auto it = workers_.find(worker_id);
        if (it == workers_.end())
            throw ProtocolError("unknown worker " + std::to_string(worker_id));
        WorkerRecord& w = it->second;
        require_legal(w.state, to, worker_id);

        log_.push_back(CoordMessage{CoordActionType::StateChange, worker_id,
                                    {{"from", worker_state_name(w.state)},
                                     {"to", worker_state_name(to)}}});

        std::vector<CoordMessage> actions;
        WorkerState from = w.state;

        if (to == WorkerState::Training) {
            if (!session_.has_value())
                throw ProtocolError("IDLE -> TRAINING without an active training session");
            if (w.dp_group != session_->dp_group)
                throw ProtocolError("worker " + std::to_string(worker_id) +
                                    " is not in the session's data-parallel group");
            w.state = to;
            session_->members.insert(worker_id);
            session_->activated = true;
            return actions; // ack of START/JOIN, nothing new to emit
        }

        w.state = to;
        if (from == WorkerState::Training) {
            if (session_.has_value()) {
                session_->members.erase(worker_id);
                if (session_->activated && session_->members.empty()) session_.reset();
            }
        }

        if (to == WorkerState::Idle && !rollout_done_) {
            if (session_.has_value()) {
                if (from == WorkerState::Busy && w.dp_group == session_->dp_group) {
                    actions.push_back(emit(CoordActionType::JoinTraining, worker_id,
                                           {{"leader_id", session_->leader_id}}));
                }
            } else if (idle_count() >= idle_threshold_) {
                int leader = lowest_idle();
                session_ = Session{leader, workers_.at(leader).dp_group, {}, false};
                actions.push_back(emit(CoordActionType::StartTraining, leader,
                                       {{"dp_group", session_->dp_group}}));
                for (const auto& [id, rec] : workers_) {
                    if (id != leader && rec.state == WorkerState::Idle &&
                        rec.dp_group == session_->dp_group) {
                        actions.push_back(emit(CoordActionType::JoinTraining, id,
                                               {{"leader_id", leader}}));
                    }
                }
            }
        }
        return actions;
    }

    /// Rollout completion: preempt every training member, request a single
    /// checkpoint from the leader, clear the session, move TRAINING workers
    /// back to IDLE.
    std::vector<CoordMessage> rollout_complete() {
        log_.push_back(CoordMessage{CoordActionType::RolloutDone, -1, {}});
        rollout_done_ = true;
        std::vector<CoordMessage> actions;
        if (session_.has_value()) {
            for (int id : session_->members) {
                actions.push_back(emit(CoordActionType::Preempt, id, nlohmann::json::object()));
            }
            actions.push_back(emit(CoordActionType::CheckpointRequest, session_->leader_id,
                                   nlohmann::json::object()));
            for (auto& [id, w] : workers_) {
                if (w.state == WorkerState::Training) w.state = WorkerState::Idle;
            }
            session_.reset();
        }
        return actions;
    }

private:
    static void require_legal(WorkerState from, WorkerState to, int worker_id) {
        bool ok = (from == WorkerState::Busy && to == WorkerState::Idle) ||
                  (from == WorkerState::Idle && to == WorkerState::Training) ||
                  (from == WorkerState::Idle && to == WorkerState::Busy) ||
                  (from == WorkerState::Training && to == WorkerState::Idle) ||
                  (from == WorkerState::Training && to == WorkerState::Busy);
        if (!ok) {
            throw ProtocolError("illegal transition " + std::string(worker_state_name(from)) +
                                " -> " + worker_state_name(to) + " for worker " +
                                std::to_string(worker_id));
        }
    }

    int lowest_idle() const {
        for (const auto& [id, w] : workers_) {
            if (w.state == WorkerState::Idle) return id;
        }
        throw ProtocolError("no idle worker available for leader election");
    }

    CoordMessage emit(CoordActionType type, int worker_id, nlohmann::json payload) {
        CoordMessage m{type, worker_id, std::move(payload)};
        log_.push_back(m);
        return m;
    }

    std::map<int, WorkerRecord> workers_;
    int idle_threshold_ = 2;
    std::optional<Session> session_;
    bool rollout_done_ = false;
    std::vector<CoordMessage> log_;
};

} // namespace specsim
