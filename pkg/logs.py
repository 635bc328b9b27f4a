# logs.py
import os
import sys
import json
import math
from enum import Enum
from pathlib import Path
from datetime import datetime, timezone
from typing import Any

import numpy as np
from pydantic import BaseModel

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

_LEVELS = {"DEBUG": 10, "INFO": 20, "WARN": 30, "WARNING": 30, "ERROR": 40}


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return to_jsonable(obj.model_dump())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return str(obj)
        return obj
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (Path, datetime)):
        return str(obj)
    return obj


def log(level: str, msg: str, **kwargs) -> None:
    level = level.upper()
    if _LEVELS.get(level, 20) < _LEVELS.get(LOG_LEVEL, 20):
        return
    payload = {
        "ts": datetime.now(timezone.utc).isoformat(),
        "level": level,
        "msg": msg,
        **to_jsonable(kwargs),
    }
    try:
        line = json.dumps(payload)
    except (TypeError, ValueError):
        line = json.dumps({"ts": payload["ts"], "level": level, "msg": msg, "fields": repr(kwargs)[:500]})
    print(line, file=sys.stderr, flush=True)
