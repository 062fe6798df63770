"""JSON schemas for diagnosis output and operator plans, with strict parsing."""

from __future__ import annotations

import json
from typing import Any

import fastjsonschema

DIAGNOSIS_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "split_tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "node_id": {"type": "string"},
                    "reason": {"type": "string"},
                    "confidence": {"type": "number"},
                },
                "required": ["node_id", "reason", "confidence"],
                "additionalProperties": False,
            },
        },
        "merge_tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "node_ids": {
                        "type": "array",
                        "items": {"type": "string"},
                        "minItems": 2,
                        "maxItems": 4,
                    },
                    "reason": {"type": "string"},
                    "confidence": {"type": "number"},
                },
                "required": ["node_ids", "reason", "confidence"],
                "additionalProperties": False,
            },
        },
        "update_tasks": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "old_node_id": {"type": "string"},
                    "new_node_id": {"type": "string"},
                    "reason": {"type": "string"},
                    "confidence": {"type": "number"},
                },
                "required": ["old_node_id", "new_node_id", "reason", "confidence"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["split_tasks", "merge_tasks", "update_tasks"],
    "additionalProperties": False,
}

_STR_LIST = {"type": "array", "items": {"type": "string"}}

SPLIT_PLAN_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "do_split": {"type": "boolean"},
        "segments": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "segment_text": {"type": "string"},
                    "segment_summary": {"type": "string"},
                    "segment_keywords": _STR_LIST,
                    "topic_label": {"type": "string"},
                },
                "required": ["segment_text", "segment_summary", "segment_keywords", "topic_label"],
                "additionalProperties": False,
            },
        },
        "split_rationale": {"type": "string"},
    },
    "required": ["do_split", "segments", "split_rationale"],
    "additionalProperties": False,
}

MERGE_PLAN_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "summary": {"type": "string"},
        "keywords": _STR_LIST,
        "salient_points": _STR_LIST,
    },
    "required": ["summary", "keywords", "salient_points"],
    "additionalProperties": False,
}

UPDATE_PLAN_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "updated_summary": {"type": "string"},
        "updated_keywords": _STR_LIST,
        "deprecations": _STR_LIST,
        "alignment_note": {"type": "string"},
    },
    "required": ["updated_summary", "updated_keywords", "deprecations", "alignment_note"],
    "additionalProperties": False,
}

DESCRIPTOR_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {"summary": {"type": "string"}, "keywords": _STR_LIST},
    "required": ["summary", "keywords"],
    "additionalProperties": False,
}

SCHEMAS: dict[str, dict[str, Any]] = {
    "diag": DIAGNOSIS_SCHEMA,
    "plan_split": SPLIT_PLAN_SCHEMA,
    "plan_merge": MERGE_PLAN_SCHEMA,
    "plan_update": UPDATE_PLAN_SCHEMA,
    "descriptor": DESCRIPTOR_SCHEMA,
}

_VALIDATORS = {name: fastjsonschema.compile(s) for name, s in SCHEMAS.items()}


class DocumentError(Exception):
    """A backend document failed to parse or validate; ``code`` is the reason code."""

    def __init__(self, code: str, detail: str) -> None:
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


def _reject_constant(token: str) -> float:
    raise ValueError(f"non-finite number {token}")


def parse_document(raw: str | bytes | dict, schema_id: str) -> dict:
    """Parse ``raw`` as JSON and validate it against a named schema.

    Raises DocumentError with code JSON_PARSE_FAIL or SCHEMA_FAIL.
    """
    if isinstance(raw, dict):
        doc = raw
    else:
        try:
            doc = json.loads(raw, parse_constant=_reject_constant)
        except (ValueError, TypeError, RecursionError) as exc:
            raise DocumentError("JSON_PARSE_FAIL", str(exc)) from None
    try:
        _VALIDATORS[schema_id](doc)
    except fastjsonschema.JsonSchemaValueException as exc:
        raise DocumentError("SCHEMA_FAIL", exc.message) from None
    return doc
