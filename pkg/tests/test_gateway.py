import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dialogue_forge.gateway import (
    API_KEY_ENV,
    BackendConfig,
    BackendUnavailable,
    BlockNotFound,
    ContextOverflow,
    DialogueMemory,
    Gateway,
    HttpBackend,
    MissingBinding,
    RecordingBackend,
    ReplayBackend,
    ReplayMiss,
    Role,
    ScriptedBackend,
    TemplateCatalog,
    TemplateNotFound,
    TransportError,
    Verdict,
    extract_code_block,
    extract_repair_tags,
    iter_code_blocks,
    make_backend,
    parse_reply,
    parse_verdict,
    prompt_digest,
    render,
    wrap_code_block,
    write_fixture,
)
from dialogue_forge.gateway.templates import placeholders


def no_sleep(_):
    pass


# ---------------------------------------------------------------------------
# templates


def test_render_substitutes_verbatim():
    text = render("strip_comments", {"CPP_Code": "int x;"})
    assert "int x;" in text
    assert "{CPP_Code}" not in text


def test_render_missing_binding_names_placeholder():
    with pytest.raises(MissingBinding) as err:
        render("strip_comments", {})
    assert err.value.placeholder == "CPP_Code"


def test_render_unknown_template():
    with pytest.raises(TemplateNotFound):
        render("no_such_template", {})
    with pytest.raises(TemplateNotFound):
        render("../etc/passwd", {})


def test_duo_verdict_phrase():
    text = render("duo_verdict", {"cpp_compile_result": "AAA-line", "cuda_compile_result": "BBB-line"})
    assert "AAA-line" in text and "BBB-line" in text
    assert "IDENTICAL final summary lines" in text


def test_every_bundled_template_renders():
    catalog = TemplateCatalog()
    for template_id in catalog.ids():
        names = placeholders(catalog.source(template_id))
        text = catalog.render(template_id, {n: f"<{n}>" for n in names})
        for n in names:
            assert f"<{n}>" in text


def test_unit_test_request_keeps_literal_braces():
    text = render("unit_test_request", {k: "X" for k in placeholders(TemplateCatalog().source("unit_test_request"))})
    assert "{" in text


def test_custom_template_directory(tmp_path):
    (tmp_path / "hello.txt").write_text("Hello {name}!", encoding="utf-8")
    catalog = TemplateCatalog(tmp_path)
    assert catalog.ids() == ["hello"]
    assert catalog.render("hello", {"name": "there"}) == "Hello there!"


# ---------------------------------------------------------------------------
# replies


def test_extract_code_block_examples():
    assert extract_code_block("```cpp\nint x;\n```", "cpp") == "int x;"
    with pytest.raises(BlockNotFound):
        extract_code_block("```cuda\nint x;\n```", "cpp")
    reply = 'Here you go.\n["fix-index"]\n```cuda\n__global__ void k() {}\n```\n'
    assert extract_code_block(reply, "cuda") == "__global__ void k() {}"


def test_extract_code_block_first_match_and_aliases():
    reply = "```c++\n\n\nint a;\n\n```\n```cpp\nint b;\n```"
    assert extract_code_block(reply, "cpp") == "int a;"
    assert extract_code_block("'''cuda\nk();\n'''", "cuda") == "k();"
    assert extract_code_block("```f90\nend\n```", "fortran") == "end"


def test_unclosed_fence_is_not_a_block():
    assert iter_code_blocks("```cpp\nint x;\n") == []


_code_lines = st.lists(
    st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\n\x0b\x0c\x1c\x1d\x1e\x85  "), max_size=40)
    .filter(lambda s: not s.lstrip().startswith(("```", "'''"))),
    min_size=1,
    max_size=10,
)


@given(_code_lines, st.sampled_from(["cpp", "cuda", "fortran"]))
def test_extract_wrap_identity(lines, tag):
    # identity holds for code without leading/trailing blank lines
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    code = "\n".join(lines)
    if not code:
        return
    assert extract_code_block(wrap_code_block(code, tag), tag) == code


def test_repair_tags_examples():
    assert extract_repair_tags('["fix-index"]\n```cuda\nx\n```') == ["fix-index"]
    assert extract_repair_tags("```cuda\nx\n```") == []
    assert extract_repair_tags('["sync","bounds"]\nrest') == ["sync", "bounds"]
    assert extract_repair_tags("[not json\n") == []
    assert extract_repair_tags("[1, 2]\n") == []
    assert extract_repair_tags("\n\n  [\"a\"]  \n") == ["a"]


def test_verdict_examples():
    assert parse_verdict("Yes") is Verdict.YES
    assert parse_verdict("no, because the kernel differs") is Verdict.NO
    assert parse_verdict("It depends") is Verdict.UNPARSEABLE
    assert parse_verdict("**YES**") is Verdict.YES
    assert parse_verdict("> No.") is Verdict.NO
    assert parse_verdict("") is Verdict.UNPARSEABLE


def test_parse_reply_bundles_everything():
    parsed = parse_reply('["a"]\n```cpp\nint x;\n```')
    assert parsed.repair_tags == ["a"]
    assert parsed.code_blocks == [("cpp", "int x;")]
    assert parsed.verdict is None
    assert parse_reply("Yes").verdict is Verdict.YES


# ---------------------------------------------------------------------------
# memory


def test_memory_alternates_and_tags():
    memory = DialogueMemory()
    memory.append_exchange("q1", "s1", "SplTestGen")
    memory.append_exchange("q2", "s2", "SplRefine")
    assert memory.is_alternating()
    assert [t.role for t in memory.turns] == [Role.QUESTIONER, Role.SOLVER] * 2
    assert memory.stage_exchanges("SplRefine") == 1
    assert memory.exchanges() == [("q1", "s1"), ("q2", "s2")]


def test_memory_rejects_empty_turns():
    with pytest.raises(ValueError):
        DialogueMemory().append_exchange("q", "", "x")


def test_memory_window_keeps_first_exchange():
    memory = DialogueMemory(token_budget=30)
    memory.append_exchange("source " * 5, "ok", "a")
    for i in range(5):
        memory.append_exchange(f"fix {i} " * 3, "done " * 3, "b")
    window = memory.window("final prompt")
    assert window[0] == memory.exchanges()[0]
    assert window[-1] == memory.exchanges()[-1]
    assert memory.rendered_tokens("final prompt") <= 30
    assert len(memory.turns) == 12  # history itself is never truncated


def test_memory_overflow():
    with pytest.raises(ContextOverflow):
        DialogueMemory(token_budget=3).window("a b c d e")


@given(st.lists(st.tuples(st.text(min_size=1, max_size=30), st.text(min_size=1, max_size=30)), max_size=20),
       st.integers(20, 200))
def test_memory_budget_respected(pairs, budget):
    memory = DialogueMemory(token_budget=budget)
    for q, s in pairs:
        memory.append_exchange(q, s, "t")
    assert memory.is_alternating()
    prompt = "next"
    assert memory.rendered_tokens(prompt) <= budget


# ---------------------------------------------------------------------------
# backends and retries


def test_replay_backend_grows_memory(tmp_path):
    fixture = tmp_path / "f.jsonl"
    write_fixture([(prompt_digest("P"), "ok")], fixture)
    gateway = Gateway(ReplayBackend.from_file(fixture))
    memory = DialogueMemory()
    assert gateway.complete(memory, "P") == "ok"
    assert len(memory.turns) == 2


def test_replay_digest_ignores_whitespace():
    backend = ReplayBackend({prompt_digest("a  b\n c"): "hit"})
    assert Gateway(backend).complete(DialogueMemory(), "a b c") == "hit"


def test_replay_miss_names_digest():
    gateway = Gateway(ReplayBackend({}))
    memory = DialogueMemory()
    with pytest.raises(ReplayMiss) as err:
        gateway.complete(memory, "unknown")
    assert err.value.digest == prompt_digest("unknown")
    assert memory.turns == []


def test_retry_then_success():
    backend = ScriptedBackend([TransportError("x"), TransportError("y"), "fine"])
    delays = []
    gateway = Gateway(backend, BackendConfig(max_retries=3), sleep=delays.append)
    assert gateway.complete(DialogueMemory(), "p") == "fine"
    assert delays == [0.5, 1.0]


def test_retries_exhausted():
    backend = ScriptedBackend([TransportError("x")] * 4)
    gateway = Gateway(backend, BackendConfig(max_retries=3), sleep=no_sleep)
    memory = DialogueMemory()
    with pytest.raises(BackendUnavailable):
        gateway.complete(memory, "p")
    assert memory.turns == []


def test_empty_reply_kept_nonempty():
    memory = DialogueMemory()
    Gateway(ScriptedBackend([""])).complete(memory, "p")
    assert memory.turns[1].content


def test_replay_determinism_over_fifty_prompts(tmp_path):
    prompts = [f"prompt number {i}: translate kernel {i * 7}" for i in range(50)]
    scripted = ScriptedBackend(lambda p: f"reply to <{p}>")
    first_gateway = Gateway(scripted)
    memory = DialogueMemory()
    first = [first_gateway.complete(memory, p) for p in prompts]
    fixture = tmp_path / "fifty.jsonl"
    scripted.dump_fixture(fixture)
    runs = []
    for _ in range(2):
        gateway = Gateway(ReplayBackend.from_file(fixture))
        mem = DialogueMemory()
        runs.append([gateway.complete(mem, p) for p in prompts])
        assert mem.exchanges() == memory.exchanges()
    assert runs[0] == runs[1] == first


def test_write_fixture_rejects_conflicts(tmp_path):
    with pytest.raises(ValueError):
        write_fixture([("d", "a"), ("d", "b")], tmp_path / "x.jsonl")


def test_recording_backend():
    rec = RecordingBackend(ScriptedBackend(["r1"]))
    Gateway(rec).complete(DialogueMemory(), "hello")
    assert rec.recorded == [(prompt_digest("hello"), "r1")]


def test_backend_config_validation(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    problems = BackendConfig(kind="live", endpoint=None).validate()
    assert any(API_KEY_ENV in p for p in problems)
    assert any("endpoint" in p for p in problems)
    with pytest.raises(ValueError):
        BackendConfig(temperature=1.5)
    with pytest.raises(ValueError):
        BackendConfig(max_retries=-1)
    with pytest.raises(ValueError):
        make_backend(BackendConfig(kind="replay"))


def test_http_backend_payload_and_errors(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "secret-token")
    seen = []
    statuses = iter([429, 503, 200])

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        status = next(statuses)
        if status != 200:
            return httpx.Response(status)
        return httpx.Response(200, json={"choices": [{"message": {"content": "translated"}}]})

    cfg = BackendConfig(kind="live", endpoint="http://llm.local/v1", model_name="m", temperature=0.2)
    backend = HttpBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)))
    gateway = Gateway(backend, cfg, system_prompt="sys", sleep=no_sleep)
    memory = DialogueMemory()
    memory.append_exchange("earlier", "answer", "x")
    assert gateway.complete(memory, "now") == "translated"
    assert len(seen) == 3
    body = json.loads(seen[-1].content)
    assert str(seen[-1].url) == "http://llm.local/v1/chat/completions"
    assert seen[-1].headers["authorization"] == "Bearer secret-token"
    assert body["temperature"] == 0.2 and body["model"] == "m"
    assert [m["role"] for m in body["messages"]] == ["system", "user", "assistant", "user"]


def test_http_backend_client_error_is_fatal(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "k")
    cfg = BackendConfig(kind="live", endpoint="http://llm.local")
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(401, text="denied")))
    with pytest.raises(BackendUnavailable):
        Gateway(HttpBackend(cfg, client=client), cfg, sleep=no_sleep).complete(DialogueMemory(), "p")


def test_http_backend_needs_key(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    cfg = BackendConfig(kind="live", endpoint="http://llm.local")
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200)))
    with pytest.raises(BackendUnavailable):
        HttpBackend(cfg, client=client).send([{"role": "user", "content": "x"}], cfg)
