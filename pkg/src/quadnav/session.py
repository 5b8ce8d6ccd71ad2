"""Live session protocol: drive a learning run over a message stream.

The core is transport-agnostic: `Session.handle_message` consumes
client->server dicts and returns an ack dict, and events fan out to attached
clients through `Session.broadcast`.  The WebSocket layer frames each
message as one JSON text frame (schema documented in docs/wire_schema.md,
version field "v").  The orchestrator runs on its own thread and never
blocks on slow clients: per-client buffers are bounded and overflow drops
the oldest snapshot-refreshable events, never metrics rows.
"""
from __future__ import annotations

import asyncio
import json
import threading
from collections import deque
from typing import Dict, List, Optional

import numpy as np

from . import orchestrator as orch
from .global_planner import valid_discrete_state
from .kinematics import standing_height_max
from .maps import voxel_records_json, world_to_discrete
from .orchestrator import LearningSession, ObstacleEdit, RunReport
from .world import BoxObstacle, Scenario, ScenarioError, scenario_from_json, voxelize

PROTOCOL_VERSION = 1
LOCAL_STATE_CHUNK = 200
CLIENT_BUFFER_CAP = 20000

# events that a late snapshot can reproduce; these may be dropped on overflow
DROPPABLE = {"world_snapshot", "global_path", "local_states", "weight_update"}

CLIENT_VARIANTS = {
    "load_scenario", "set_start", "set_goal", "add_obstacle", "remove_obstacle",
    "start_run", "pause_run", "reset_weights", "request_snapshot",
}


class ClientHandle:
    """Bounded, ordered per-client event buffer (thread-safe)."""

    def __init__(self, name: str = "client"):
        self.name = name
        self._buf = deque()
        self._lock = threading.Lock()
        self.closed = False

    def deliver(self, event: dict) -> None:
        with self._lock:
            if self.closed:
                return
            if len(self._buf) >= CLIENT_BUFFER_CAP:
                for i, e in enumerate(self._buf):
                    if e.get("type") in DROPPABLE:
                        del self._buf[i]
                        break
                else:
                    self._buf.popleft()
            self._buf.append(event)

    def drain(self) -> List[dict]:
        with self._lock:
            out = list(self._buf)
            self._buf.clear()
        return out

    def close(self) -> None:
        self.closed = True


class Session:
    def __init__(self, scenario: Optional[Scenario] = None):
        self.scenario = scenario
        self.learning: Optional[LearningSession] = (
            LearningSession(scenario=scenario) if scenario is not None else None
        )
        self.clients: List[ClientHandle] = []
        self.run_thread: Optional[threading.Thread] = None
        self.run_error: Optional[str] = None
        self.last_report: Optional[RunReport] = None
        self.last_path_cells: List = []
        self._pause = threading.Event()
        self._lock = threading.Lock()
        self._sent_pos = 0
        self._sent_act = 0

    # -- client management ---------------------------------------------------

    def attach(self, name: str = "client") -> ClientHandle:
        handle = ClientHandle(name)
        self.clients.append(handle)
        # late-join contract: a snapshot precedes any incremental events
        handle.deliver(self._snapshot_event())
        return handle

    def detach(self, handle: ClientHandle) -> None:
        handle.close()
        if handle in self.clients:
            self.clients.remove(handle)

    def broadcast(self, event: dict) -> None:
        for c in list(self.clients):
            c.deliver(event)

    # -- message handling ----------------------------------------------------

    def handle_message(self, msg: dict) -> dict:
        seq = msg.get("seq")
        mtype = msg.get("type")
        try:
            if mtype not in CLIENT_VARIANTS:
                raise ValueError(f"unknown message type {mtype!r}")
            detail = getattr(self, f"_on_{mtype}")(msg)
        except Exception as e:  # typed error surface per message
            return self._ack(seq, ok=False, error=str(e))
        return self._ack(seq, ok=True, detail=detail)

    def _ack(self, seq, ok: bool, error: Optional[str] = None, detail=None) -> dict:
        ack = {"v": PROTOCOL_VERSION, "type": "ack", "seq": seq, "ok": ok}
        if error is not None:
            ack["error"] = error
        if detail is not None:
            ack["detail"] = detail
        return ack

    def _require_idle(self, what: str) -> None:
        if self.running:
            raise ValueError(f"{what} rejected: run in progress")

    def _require_scenario(self) -> Scenario:
        if self.scenario is None:
            raise ValueError("no scenario loaded")
        return self.scenario

    @property
    def running(self) -> bool:
        return self.run_thread is not None and self.run_thread.is_alive()

    def _on_load_scenario(self, msg: dict):
        self._require_idle("load_scenario")
        scenario = scenario_from_json(msg["document"])
        self.scenario = scenario
        self.learning = LearningSession(scenario=scenario)
        self.last_path_cells = []
        self.last_report = None
        self._sent_pos = 0
        self._sent_act = 0
        self.broadcast(self._snapshot_event())
        return {"boxes": len(scenario.boxes)}

    def _replace_pose(self, msg: dict, which: str):
        self._require_idle(f"set_{which}")
        scenario = self._require_scenario()
        pose = (np.asarray(msg["position"], dtype=float), float(msg.get("yaw", 0.0)))
        kwargs = dict(
            boxes=self.learning.boxes,
            start_pose=scenario.start_pose,
            goal_pose=scenario.goal_pose,
            voxel_resolution=scenario.voxel_resolution,
            robot=scenario.robot,
            params=scenario.params,
        )
        kwargs[f"{which}_pose"] = pose
        try:
            candidate = Scenario(**kwargs)
        except ScenarioError as e:
            raise ValueError(f"{which} invalid: {e}") from e
        vmap = voxelize(candidate)
        cell = world_to_discrete(pose[0], vmap)
        if not valid_discrete_state(cell, vmap, standing_height_max(scenario.robot)):
            raise ValueError(f"{which} invalid: cell {cell} is not a valid standing cell")
        self.scenario = candidate
        self.learning.scenario = candidate
        return {which: list(map(float, pose[0]))}

    def _on_set_start(self, msg: dict):
        return self._replace_pose(msg, "start")

    def _on_set_goal(self, msg: dict):
        return self._replace_pose(msg, "goal")

    def _on_add_obstacle(self, msg: dict):
        self._require_scenario()
        box = BoxObstacle.from_json(msg["box"])
        edit = ObstacleEdit(op="add", box=box, box_id=box.id,
                            iteration=msg.get("iteration"))
        self.learning.edit_queue.push(edit)
        return {"queued": "add", "id": box.id}

    def _on_remove_obstacle(self, msg: dict):
        self._require_scenario()
        box_id = msg.get("id")
        if not box_id:
            raise ValueError("remove_obstacle requires an id")
        edit = ObstacleEdit(op="remove", box_id=box_id, iteration=msg.get("iteration"))
        self.learning.edit_queue.push(edit)
        return {"queued": "remove", "id": box_id}

    def _on_reset_weights(self, msg: dict):
        self._require_idle("reset_weights")
        self._require_scenario()
        self.learning.reset_weights()
        self._sent_pos = 0
        self._sent_act = 0
        return {"weights": 0}

    def _on_request_snapshot(self, msg: dict):
        self.broadcast(self._snapshot_event())
        return {"snapshot": True}

    def _on_pause_run(self, msg: dict):
        if not self.running:
            raise ValueError("pause_run rejected: no run in progress")
        self._pause.set()
        return {"paused": True}

    def _on_start_run(self, msg: dict):
        scenario = self._require_scenario()
        if self._pause.is_set():
            self._pause.clear()
            return {"resumed": True}
        self._require_idle("start_run")
        max_iters = int(msg.get("max_iterations", 20))
        self.run_error = None
        self.run_thread = threading.Thread(
            target=self._run, args=(scenario, max_iters), daemon=True
        )
        self.run_thread.start()
        return {"started": True, "max_iterations": max_iters}

    # -- run machinery ---------------------------------------------------------

    def _run(self, scenario: Scenario, max_iters: int) -> None:
        try:
            report = orch.run_learning(
                scenario, max_iterations=max_iters,
                session=self.learning, on_iteration=self._on_iteration,
            )
            self.last_report = report
            self.broadcast({
                "v": PROTOCOL_VERSION, "type": "run_finished",
                "report": report.to_json(include_timing=True),
            })
        except Exception as e:
            self.run_error = str(e)
            self.broadcast({"v": PROTOCOL_VERSION, "type": "error", "text": str(e)})

    def _on_iteration(self, row, states, gp) -> None:
        while self._pause.is_set():
            threading.Event().wait(0.02)
        self.last_path_cells = [list(c) for c in gp.states]
        self.broadcast({
            "v": PROTOCOL_VERSION, "type": "global_path",
            "iteration": row.iteration, "cells": self.last_path_cells,
        })
        flat = [s.as_flat() for s in states]
        chunks = [flat[i:i + LOCAL_STATE_CHUNK] for i in range(0, len(flat), LOCAL_STATE_CHUNK)] or [[]]
        for ci, chunk in enumerate(chunks):
            self.broadcast({
                "v": PROTOCOL_VERSION, "type": "local_states",
                "iteration": row.iteration, "chunk_index": ci,
                "states": chunk, "last": ci == len(chunks) - 1,
            })
        pos_log = self.learning.pos_weights.log
        act_log = self.learning.act_weights.log
        new_pos = [[list(c), d] for _, c, d in pos_log[self._sent_pos:]]
        new_act = [[list(c), list(a), d] for _, c, a, d in act_log[self._sent_act:]]
        self._sent_pos = len(pos_log)
        self._sent_act = len(act_log)
        if new_pos or new_act:
            self.broadcast({
                "v": PROTOCOL_VERSION, "type": "weight_update",
                "positional": new_pos, "action": new_act,
            })
        self.broadcast({
            "v": PROTOCOL_VERSION, "type": "iteration_metrics",
            "row": row.to_json(),
        })

    def _snapshot_event(self) -> dict:
        event = {"v": PROTOCOL_VERSION, "type": "world_snapshot",
                 "scenario_loaded": self.scenario is not None}
        if self.scenario is None:
            return event
        if self.learning.vmap is None:
            self.learning.revoxelize()
        event["voxels"] = voxel_records_json(self.learning.vmap)
        event["boxes"] = [b.to_json() for b in self.learning.boxes]
        event["pending_edits"] = len(self.learning.edit_queue._pending)
        sp, sy = self.scenario.start_pose
        gp, gy = self.scenario.goal_pose
        event["start"] = {"position": [float(v) for v in sp], "yaw": sy}
        event["goal"] = {"position": [float(v) for v in gp], "yaw": gy}
        event["weights"] = {
            "positional": [[list(c), w] for c, w in sorted(self.learning.pos_weights.weights.items())],
            "action": [[list(c), list(a), w] for (c, a), w in sorted(self.learning.act_weights.weights.items())],
        }
        event["last_path"] = self.last_path_cells
        return event


# ---------------------------------------------------------------------------
# WebSocket transport

async def _client_loop(session: Session, ws) -> None:
    handle = session.attach(name=str(getattr(ws, "remote_address", "ws")))

    async def sender():
        try:
            while True:
                for event in handle.drain():
                    await ws.send(json.dumps(event))
                await asyncio.sleep(0.02)
        except Exception:
            pass

    send_task = asyncio.create_task(sender())
    try:
        async for raw in ws:
            try:
                msg = json.loads(raw)
            except json.JSONDecodeError:
                await ws.send(json.dumps({
                    "v": PROTOCOL_VERSION, "type": "ack", "seq": None,
                    "ok": False, "error": "malformed JSON frame",
                }))
                continue
            ack = session.handle_message(msg)
            await ws.send(json.dumps(ack))
    finally:
        send_task.cancel()
        session.detach(handle)


def serve_forever(host: str, port: int, scenario: Optional[Scenario] = None) -> None:
    """Blocking WebSocket server; ^C stops it."""
    import websockets

    session = Session(scenario)

    async def main():
        async with websockets.serve(lambda ws: _client_loop(session, ws), host, port):
            print(f"serving session protocol on ws://{host}:{port}")
            await asyncio.Future()

    asyncio.run(main())
