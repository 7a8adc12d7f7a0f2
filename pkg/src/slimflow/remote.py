"""Evaluator that executes a workflow against a chat-completions endpoint."""

from __future__ import annotations

import logging
import os
import re
import time
from collections.abc import Callable, Mapping
from typing import Any

import httpx

from .evaluation import DatasetInstance, EvaluationError, InstanceError, InstanceResult, ModelCall
from .graph import INPUT, WorkflowGraph, topo_order

logger = logging.getLogger(__name__)

API_KEY_ENV = "SLIM_API_KEY"
API_BASE_ENV = "SLIM_API_BASE"

Grader = Callable[[str, Any], float]

_NUMBER = re.compile(r"-?\d+(?:,\d{3})*(?:\.\d+)?(?:[eE][-+]?\d+)?")

DEFAULT_PROMPTS = {
    "AnswerGenerate": "Solve the task step by step, then state the final answer on the last line.",
    "Programmer": "Write and mentally execute a short Python program that solves the task; report its result.",
    "CustomCodeGenerate": "Write a complete, self-contained Python solution for the task. Return only code.",
    "Test": "Check the candidate solution for errors and return a corrected solution.",
    "ScEnsemble": "Several candidate answers follow. Return the answer most of them agree on.",
    "CodeRefine": "Improve the draft solution using programmatic reasoning. Return the improved answer.",
    "Custom": "Complete the task described by the input.",
    "AnswerFormat": "Return only the final answer for the {dataset} dataset, with no explanation.",
}


def exact_match(output: str, target: Any) -> float:
    return float(output.strip().casefold() == str(target).strip().casefold())


def last_number(text: str) -> float | None:
    found = _NUMBER.findall(text)
    if not found:
        return None
    return float(found[-1].replace(",", ""))


def numeric_match(tol: float = 1e-6) -> Grader:
    def grade(output: str, target: Any) -> float:
        got = last_number(output)
        want = target if isinstance(target, (int, float)) else last_number(str(target))
        if got is None or want is None:
            return 0.0
        return float(abs(got - float(want)) <= tol * max(1.0, abs(float(want))))

    return grade


GRADERS: dict[str, Grader] = {"exact": exact_match, "numeric": numeric_match()}


class HttpEvaluator:
    """Run each node as one chat-completions call, in topological order.

    Input nodes make no call; they forward the instance input. Each other
    node receives its prompt as the system message and the instance input
    plus its predecessors' outputs as the user message. The final node's
    output is graded. Temperature is always 0.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        grader: Grader | str = "exact",
        prompts: Mapping[str, str] | None = None,
        max_attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        max_workers: int = 4,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise EvaluationError("endpoint URL is not configured")
        if not api_key:
            raise EvaluationError(f"credential missing; set {API_KEY_ENV}")
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key
        self.grader = GRADERS[grader] if isinstance(grader, str) else grader
        self.prompts = dict(prompts or {})
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.max_workers = max_workers
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs: Any) -> HttpEvaluator:
        return cls(os.environ.get(API_BASE_ENV, ""), os.environ.get(API_KEY_ENV, ""), **kwargs)

    def close(self) -> None:
        self._client.close()

    def _system_prompt(self, node) -> str:
        if node.prompt_ref is not None:
            if node.prompt_ref not in self.prompts:
                raise EvaluationError(f"prompt {node.prompt_ref!r} for node {node.id} not found")
            return self.prompts[node.prompt_ref]
        template = DEFAULT_PROMPTS.get(node.operator, DEFAULT_PROMPTS["Custom"])
        return template.format(dataset=node.dataset or "target")

    def _post(self, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last: str = ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._client.post(self.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise InstanceError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError:
                        raise InstanceError("malformed response: body is not JSON") from None
            if attempt < self.max_attempts:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        raise InstanceError(f"endpoint failed after {self.max_attempts} attempts ({last})")

    def _complete(self, model: str, system: str, user: str) -> tuple[str, int, int]:
        body = self._post(
            {
                "model": model,
                "temperature": 0,
                "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
            }
        )
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body["usage"]
            return str(text), int(usage["prompt_tokens"]), int(usage["completion_tokens"])
        except (KeyError, IndexError, TypeError, ValueError):
            raise InstanceError("malformed response: missing choices or usage") from None

    def __call__(self, graph: WorkflowGraph, instance: DatasetInstance) -> InstanceResult:
        outputs: dict[str, str] = {}
        calls = []
        for v in topo_order(graph):
            node = graph.node(v)
            preds = graph.predecessors(v)
            if node.operator == INPUT:
                outputs[v] = instance.input
                continue
            parts = [f"Task:\n{instance.input}"]
            parts += [f"Output of {p}:\n{outputs[p]}" for p in preds if graph.node(p).operator != INPUT]
            text, n_in, n_out = self._complete(node.model, self._system_prompt(node), "\n\n".join(parts))
            outputs[v] = text
            calls.append(ModelCall(v, node.model, n_in, n_out))
        answer = outputs.get(graph.final_id, "")
        return InstanceResult(self.grader(answer, instance.target), tuple(calls), answer)
