import json
import math

import numpy as np

from logs import log, to_jsonable
from solver import KktResiduals, QpStatus


def test_to_jsonable_dumps_models_recursively():
    res = KktResiduals(primal=1e-9, dual=0.5, complementarity=math.inf)
    assert to_jsonable(res) == {"primal": 1e-9, "dual": 0.5, "complementarity": "inf"}
    nested = to_jsonable({"kkt": res, "status": QpStatus.OPTIMAL, "x": np.array([1.0, 2.0])})
    assert nested == {"kkt": {"primal": 1e-9, "dual": 0.5, "complementarity": "inf"}, "status": "optimal",
                      "x": [1.0, 2.0]}


def test_log_line_carries_model_fields(capsys):
    log("error", "kkt_check", residuals=KktResiduals(primal=0.0, dual=1.0, complementarity=0.0))
    line = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert line["msg"] == "kkt_check"
    assert line["level"] == "ERROR"
    assert line["residuals"] == {"primal": 0.0, "dual": 1.0, "complementarity": 0.0}
