from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any

from app.config import settings


def parse_event(message: str) -> dict[str, Any]:
    """Split an ``event.name key=value ...`` message into its parts.

    Messages that do not follow the pattern come back as ``{"msg": message}``.
    """
    head, _, rest = message.partition(" ")
    if "." not in head or "=" in head:
        return {"msg": message}
    fields: dict[str, Any] = {"event": head}
    for token in rest.split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            return {"msg": message}
        fields[key] = value
    return fields


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:  # type: ignore[override]
        payload: dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc)
            .isoformat()
            .replace("+00:00", "Z"),
            "level": record.levelname,
            "name": record.name,
        }
        message = record.getMessage()
        payload.update(parse_event(message))
        payload.setdefault("msg", message)
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


_DEF_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

_configured = False


def setup_logging(
    level: str | None = None, json_mode: bool | None = None, force: bool = False
) -> None:
    global _configured
    if _configured and not force:  # idempotent
        return
    level = level or settings.LOG_LEVEL
    json_mode = settings.LOG_JSON if json_mode is None else json_mode
    root = logging.getLogger()
    root.setLevel(level.upper())
    # stdout carries reports only
    handler = logging.StreamHandler(sys.stderr)
    if json_mode:
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter(_DEF_FORMAT))
    root.handlers.clear()
    root.addHandler(handler)
    # joblib worker chatter stays out of run logs
    logging.getLogger("joblib").setLevel(logging.WARNING)
    _configured = True
