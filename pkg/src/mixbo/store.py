"""Append-only event-log persistence for campaigns.

One campaign is one ``<id>.events.jsonl`` file: one JSON object per line,
written with sorted keys and no timestamps, so identical seeds produce
byte-identical logs. State is always reconstructed by replay; the file is
the single source of truth.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

from .campaign import (
    CampaignState,
    ProposeOutcome,
    apply_event,
    create_campaign,
    evaluate_with_oracle,
    propose_batch,
    record_results,
    replay_events,
)
from .errors import ConflictingData, InvalidInput, UnknownCampaign
from .oracle import OracleSpec

_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_SUFFIX = ".events.jsonl"


def event_to_line(event: dict) -> str:
    return json.dumps(event, sort_keys=True, separators=(",", ":"))


class CampaignStore:
    """Filesystem-backed campaign registry."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, campaign_id: str) -> Path:
        if not _ID_PATTERN.match(campaign_id):
            raise InvalidInput(
                f"campaign id {campaign_id!r} is not a safe file name"
            )
        return self.directory / f"{campaign_id}{_SUFFIX}"

    def exists(self, campaign_id: str) -> bool:
        return self.path_for(campaign_id).exists()

    def list_campaigns(self) -> list[str]:
        return sorted(
            p.name[: -len(_SUFFIX)]
            for p in self.directory.glob(f"*{_SUFFIX}")
        )

    def create(self, config: dict) -> CampaignState:
        state, events = create_campaign(config)
        path = self.path_for(state.campaign_id)
        if path.exists():
            raise ConflictingData(
                f"campaign {state.campaign_id!r} already exists"
            )
        self._append(path, events, mode="x")
        return state

    def events(self, campaign_id: str) -> list[dict]:
        path = self.path_for(campaign_id)
        if not path.exists():
            raise UnknownCampaign(f"no campaign named {campaign_id!r}")
        lines = path.read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def raw_log(self, campaign_id: str) -> str:
        path = self.path_for(campaign_id)
        if not path.exists():
            raise UnknownCampaign(f"no campaign named {campaign_id!r}")
        return path.read_text(encoding="utf-8")

    def load(self, campaign_id: str) -> CampaignState:
        return replay_events(self.events(campaign_id))

    def append_events(self, campaign_id: str, events) -> None:
        path = self.path_for(campaign_id)
        if not path.exists():
            raise UnknownCampaign(f"no campaign named {campaign_id!r}")
        self._append(path, events, mode="a")

    def _append(self, path: Path, events, mode: str) -> None:
        payload = "".join(event_to_line(event) + "\n" for event in events)
        with open(path, mode, encoding="utf-8") as handle:
            handle.write(payload)

    # Convenience wrappers: load, transition, persist.

    def propose(self, campaign_id: str) -> ProposeOutcome:
        state = self.load(campaign_id)
        outcome = propose_batch(state)
        self.append_events(campaign_id, outcome.events)
        return outcome

    def record(self, campaign_id: str, batch_results) -> CampaignState:
        state = self.load(campaign_id)
        new_state, events = record_results(state, batch_results)
        self.append_events(campaign_id, events)
        return new_state

    def evaluate(self, campaign_id: str, oracle: OracleSpec) -> CampaignState:
        state = self.load(campaign_id)
        new_state, events = evaluate_with_oracle(state, oracle)
        self.append_events(campaign_id, events)
        return new_state
