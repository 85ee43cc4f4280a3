"""JSON-lines adapter used by the integration tests.

Images are small text files naming the concepts a model draws. An edited
model drops every prompt concept that ends with one of its erased phrases.
Generation of "large metallic bowl" with seed 3 always fails.
"""

import hashlib
import json
import os
import sys
import tempfile

OUT = tempfile.mkdtemp(prefix="fake-adapter-")
MODELS = {"fake-t2i": []}


def concept_of(prompt):
    for prefix in ("An image of an ", "An image of a "):
        if prompt.startswith(prefix):
            return prompt[len(prefix):]
    raise ValueError(f"unparseable prompt {prompt!r}")


def generate(p):
    erased = MODELS[p["model_id"]]
    concept = concept_of(p["prompt"])
    if concept == "large metallic bowl" and p["seed"] == 3:
        raise RuntimeError("sampler diverged")
    drawn = [] if any(concept == e or concept.endswith(" " + e) for e in erased) else [concept]
    body = json.dumps({"model": p["model_id"], "seed": p["seed"], "drawn": drawn}).encode()
    path = os.path.join(OUT, hashlib.sha256(body).hexdigest() + ".json")
    with open(path, "wb") as fh:
        fh.write(body)
    return {"payload": {"kind": "file", "path": path, "digest": ""}}


def drawn(payload):
    with open(payload["path"]) as fh:
        return json.load(fh)["drawn"]


def edit(p):
    assert p["settings"].get("strength") == 1.0, p["settings"]
    model = p["base_model_id"] + "+" + "|".join(p["targets"])
    MODELS[model] = MODELS[p["base_model_id"]] + p["targets"]
    return {"model_id": model}


def classify(p):
    present = drawn(p["payload"])
    return {"scores": [1.0 if label in present else 0.0 for label in p["labels"]]}


def answer(p):
    q = p["question"]
    for prefix in ("Is there an ", "Is there a "):
        if q.startswith(prefix):
            concept = q[len(prefix):].removesuffix(" in the image?")
            return {"answer": "Yes." if concept in drawn(p["payload"]) else "no"}
    return {"answer": "maybe"}


OPS = {
    "capabilities": lambda p: {
        "returns_attention_maps": False,
        "max_concurrent_requests": 2,
        "attention_extraction": "none (fake adapter)",
    },
    "verifier_info": lambda p: {"version": "fake-1", "capacity": 2},
    "generate": generate,
    "edit": edit,
    "classify": classify,
    "answer": answer,
}

for line in sys.stdin:
    if not line.strip():
        continue
    req = json.loads(line)
    try:
        reply = {"id": req["id"], "ok": True, "result": OPS[req["op"]](req["params"])}
    except Exception as exc:  # reported back to the harness
        reply = {"id": req["id"], "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    sys.stdout.write(json.dumps(reply) + "\n")
    sys.stdout.flush()
