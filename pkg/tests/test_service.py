"""HTTP endpoints: parity with in-process calls, error mapping,
blinding, persistence, and media-path containment."""

import json

import pytest
from fastapi.testclient import TestClient

from avmatch.errors import BadConfig, IoFailure
from avmatch.index import top_k
from avmatch.service import (
    ServiceConfig,
    ServiceState,
    create_app,
    load_media_manifest,
    load_service_config,
)
from avmatch.store import save_store, synth_store
from avmatch.study import PoolEntry, StudyStore, build_pool, resolve_choice

BLINDED_ITEM_KEYS = {"comparison_id", "frame_id", "frame_url",
                     "left_audio_url", "right_audio_url"}


def pool_entries(dataset, n):
    return [PoolEntry(frame_id=f"{dataset}-frm-{i:04d}", dataset=dataset,
                      sfx_system_1=f"{dataset}-ours-{i:04d}",
                      sfx_system_2=f"{dataset}-base-{i:04d}")
            for i in range(n)]


def make_media_root(tmp_path):
    root = tmp_path / "media"
    (root / "frames").mkdir(parents=True)
    (root / "audio").mkdir()
    (root / "frames" / "ok.png").write_bytes(b"\x89PNG fake image")
    (root / "audio" / "ok.wav").write_bytes(b"RIFF fake audio")
    (tmp_path / "outside.txt").write_text("secret")
    manifest = {
        "frame": {"frm-ok": "frames/ok.png",
                  "frm-missing-file": "frames/missing.png",
                  "frm-escape": "../outside.txt"},
        "audio": {"sfx-ok": "audio/ok.wav"},
    }
    (root / "manifest.json").write_text(json.dumps(manifest))
    return str(root)


def make_state(tmp_path, session_size=10, media=True):
    frames = synth_store(1, 25, 8, 3, 0.15, kind="frame")
    audio = synth_store(2, 25, 8, 3, 0.15, kind="audio")
    pool = build_pool(pool_entries("A", 8), pool_entries("B", 8),
                      per_dataset=8, seed=0)
    media_root = make_media_root(tmp_path) if media else None
    return ServiceState(
        frame_store=frames,
        audio_store=audio,
        study=StudyStore(tmp_path / "votes.jsonl"),
        pool=pool,
        session_size=session_size,
        pool_seed=3,
        media_root=media_root,
        media_manifest=load_media_manifest(media_root),
    )


def make_client(tmp_path, **kwargs):
    state = make_state(tmp_path, **kwargs)
    return TestClient(create_app(state)), state


class TestHealth:
    def test_reports_store_sizes(self, tmp_path):
        client, state = make_client(tmp_path)
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["versions"]["api"] == "v1"
        assert body["stores"] == {"frames": len(state.frame_store),
                                  "audio": len(state.audio_store)}

    def test_unknown_route_is_json_error(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.get("/v1/nope")
        assert resp.status_code == 404
        assert resp.json()["code"] == "not_found"

    def test_wrong_method_is_json_error(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.post("/v1/health")
        assert resp.status_code == 405
        assert resp.json()["code"] == "bad_method"


class TestRetrieve:
    def test_matches_in_process_search(self, tmp_path):
        client, state = make_client(tmp_path)
        frame_id = state.frame_store.ids[4]
        resp = client.get("/v1/retrieve",
                          params={"frame_id": frame_id, "k": 7})
        assert resp.status_code == 200
        body = resp.json()
        assert body["frame_id"] == frame_id
        assert body["k"] == 7
        ranked = top_k(state.audio_store, state.frame_store.vector(frame_id),
                       7)
        assert [r["audio_id"] for r in body["results"]] == ranked.ids()
        assert [r["score"] for r in body["results"]] == ranked.scores()
        for r in body["results"]:
            assert r["category"] == \
                state.audio_store.meta_of(r["audio_id"]).category

    def test_default_k_is_ten(self, tmp_path):
        client, state = make_client(tmp_path)
        resp = client.get("/v1/retrieve",
                          params={"frame_id": state.frame_store.ids[0]})
        assert resp.status_code == 200
        assert len(resp.json()["results"]) == 10

    def test_bad_k(self, tmp_path):
        client, state = make_client(tmp_path)
        frame_id = state.frame_store.ids[0]
        for k in (0, -1, 101):
            resp = client.get("/v1/retrieve",
                              params={"frame_id": frame_id, "k": k})
            assert resp.status_code == 400
            assert resp.json()["code"] == "bad_k"

    def test_unknown_frame(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.get("/v1/retrieve", params={"frame_id": "ghost"})
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_frame"

    def test_non_integer_k_maps_to_400(self, tmp_path):
        client, state = make_client(tmp_path)
        resp = client.get("/v1/retrieve",
                          params={"frame_id": state.frame_store.ids[0],
                                  "k": "lots"})
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_request"


class TestStudySession:
    def test_payload_is_blinded(self, tmp_path):
        client, state = make_client(tmp_path)
        resp = client.post("/v1/study/session", json={"rater_id": "r1"})
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["items"]) == state.session_size
        for item in body["items"]:
            assert set(item) == BLINDED_ITEM_KEYS
            assert item["frame_url"] == f"/v1/media/frame/{item['frame_id']}"
            assert item["left_audio_url"] != item["right_audio_url"]

    def test_urls_resolve_through_presentation_order(self, tmp_path):
        client, state = make_client(tmp_path)
        body = client.post("/v1/study/session",
                           json={"rater_id": "r1"}).json()
        for item in body["items"]:
            truth = state.study.comparisons[item["comparison_id"]]
            assert item["left_audio_url"] == \
                f"/v1/media/audio/{truth.side_audio('left')}"
            assert item["right_audio_url"] == \
                f"/v1/media/audio/{truth.side_audio('right')}"

    def test_session_persisted_before_response(self, tmp_path):
        client, state = make_client(tmp_path)
        body = client.post("/v1/study/session", json={"rater_id": "r1"}).json()
        stored = state.study.get_session(body["session_id"])
        assert stored is not None
        assert [it.comparison_id for it in stored.items] == \
            [it["comparison_id"] for it in body["items"]]
        lines = (tmp_path / "votes.jsonl.sessions.jsonl").read_text() \
            .splitlines()
        assert len(lines) == 1

    def test_repeat_requests_get_fresh_sessions(self, tmp_path):
        client, _ = make_client(tmp_path)
        a = client.post("/v1/study/session", json={"rater_id": "r1"}).json()
        b = client.post("/v1/study/session", json={"rater_id": "r1"}).json()
        assert a["session_id"] != b["session_id"]

    def test_explicit_seed_reuse_conflicts(self, tmp_path):
        client, _ = make_client(tmp_path)
        first = client.post("/v1/study/session",
                            json={"rater_id": "r1", "seed": 5})
        assert first.status_code == 200
        second = client.post("/v1/study/session",
                             json={"rater_id": "r1", "seed": 5})
        assert second.status_code == 409
        assert second.json()["code"] == "duplicate_session"

    def test_pool_too_small(self, tmp_path):
        client, _ = make_client(tmp_path, session_size=1000)
        resp = client.post("/v1/study/session", json={"rater_id": "r1"})
        assert resp.status_code == 409
        assert resp.json()["code"] == "pool_too_small"

    def test_missing_rater_id(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.post("/v1/study/session", json={})
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_request"


class TestStudyVote:
    def start(self, tmp_path):
        client, state = make_client(tmp_path)
        body = client.post("/v1/study/session", json={"rater_id": "r"}).json()
        return client, state, body

    def test_vote_records_resolved_choice(self, tmp_path):
        client, state, body = self.start(tmp_path)
        item = body["items"][0]
        resp = client.post("/v1/study/vote", json={
            "session_id": body["session_id"],
            "comparison_id": item["comparison_id"], "choice": "left"})
        assert resp.status_code == 204
        assert resp.content == b""
        truth = state.study.comparisons[item["comparison_id"]]
        expected = resolve_choice(truth.presentation_order, "left")
        assert state.study.votes[-1].choice == expected

    def test_duplicate_vote(self, tmp_path):
        client, _, body = self.start(tmp_path)
        payload = {"session_id": body["session_id"],
                   "comparison_id": body["items"][0]["comparison_id"],
                   "choice": "right"}
        assert client.post("/v1/study/vote", json=payload).status_code == 204
        resp = client.post("/v1/study/vote", json=payload)
        assert resp.status_code == 409
        assert resp.json()["code"] == "duplicate_vote"

    def test_unknown_comparison(self, tmp_path):
        client, _, body = self.start(tmp_path)
        resp = client.post("/v1/study/vote", json={
            "session_id": body["session_id"], "comparison_id": "ghost",
            "choice": "left"})
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_comparison"

    def test_comparison_from_other_session_rejected(self, tmp_path):
        client, _, body = self.start(tmp_path)
        other = client.post("/v1/study/session",
                            json={"rater_id": "r2"}).json()
        resp = client.post("/v1/study/vote", json={
            "session_id": body["session_id"],
            "comparison_id": other["items"][0]["comparison_id"],
            "choice": "left"})
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_comparison"

    def test_bad_choice(self, tmp_path):
        client, _, body = self.start(tmp_path)
        resp = client.post("/v1/study/vote", json={
            "session_id": body["session_id"],
            "comparison_id": body["items"][0]["comparison_id"],
            "choice": "system_1"})
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_choice"


class TestStudyResults:
    def test_full_session_results_match_store(self, tmp_path):
        client, state = make_client(tmp_path)
        body = client.post("/v1/study/session", json={"rater_id": "r"}).json()
        sides = ["left", "right"]
        expected_k = {"A": 0, "B": 0}
        expected_n = {"A": 0, "B": 0}
        for i, item in enumerate(body["items"]):
            side = sides[i % 2]
            assert client.post("/v1/study/vote", json={
                "session_id": body["session_id"],
                "comparison_id": item["comparison_id"],
                "choice": side}).status_code == 204
            truth = state.study.comparisons[item["comparison_id"]]
            expected_n[truth.dataset] += 1
            if resolve_choice(truth.presentation_order, side) == "system_1":
                expected_k[truth.dataset] += 1

        log_lines = (tmp_path / "votes.jsonl").read_text().splitlines()
        assert len(log_lines) == len(body["items"])

        resp = client.get("/v1/study/results")
        assert resp.status_code == 200
        results = resp.json()
        assert results == state.study.result().to_dict()
        assert results["n_total"] == len(body["items"])
        for d in results["datasets"]:
            assert d["n"] == expected_n[d["dataset"]]
            assert d["k_system_1"] == expected_k[d["dataset"]]

    def test_empty_results(self, tmp_path):
        client, _ = make_client(tmp_path)
        results = client.get("/v1/study/results").json()
        assert results["n_total"] == 0
        for d in results["datasets"]:
            assert d["proportion"] is None and d["p_value"] is None

    def test_restart_replays_votes(self, tmp_path):
        client, state = make_client(tmp_path)
        body = client.post("/v1/study/session", json={"rater_id": "r"}).json()
        for item in body["items"][:4]:
            client.post("/v1/study/vote", json={
                "session_id": body["session_id"],
                "comparison_id": item["comparison_id"], "choice": "left"})
        before = client.get("/v1/study/results").json()

        # new process over the same files
        reopened = ServiceState(
            frame_store=state.frame_store, audio_store=state.audio_store,
            study=StudyStore(tmp_path / "votes.jsonl"), pool=state.pool,
            session_size=state.session_size, pool_seed=state.pool_seed)
        client2 = TestClient(create_app(reopened))
        assert client2.get("/v1/study/results").json() == before
        # and duplicates are still rejected after the restart
        resp = client2.post("/v1/study/vote", json={
            "session_id": body["session_id"],
            "comparison_id": body["items"][0]["comparison_id"],
            "choice": "right"})
        assert resp.status_code == 409


class TestMedia:
    def test_serves_manifest_file_with_content_type(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.get("/v1/media/frame/frm-ok")
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("image/")
        assert resp.content == b"\x89PNG fake image"
        resp = client.get("/v1/media/audio/sfx-ok")
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("audio/")

    def test_unknown_id(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.get("/v1/media/frame/frm-unlisted")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_media"

    def test_manifest_entry_with_missing_file(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.get("/v1/media/frame/frm-missing-file")
        assert resp.status_code == 404

    def test_traversal_id_rejected(self, tmp_path):
        # single path segments that reach the handler but are illegal
        # ids: leading dot, embedded "..", percent-encoded ".."
        client, _ = make_client(tmp_path)
        for bad in (".hidden", "a..b", "%2e%2e"):
            resp = client.get(f"/v1/media/frame/{bad}")
            assert resp.status_code == 400, bad
            assert resp.json()["code"] == "bad_id"

    def test_traversal_url_never_serves_content(self, tmp_path):
        # clients and routers may normalize ".." segments or decode
        # %2F before the handler sees the id, turning these into 404s
        # rather than 400s; either way no file content may come back
        client, _ = make_client(tmp_path)
        for bad in ("..", "..%2Fmanifest.json", "..%2F..%2Foutside.txt",
                    "a%2Fb"):
            resp = client.get(f"/v1/media/frame/{bad}")
            assert resp.status_code in (400, 404), bad
            assert "secret" not in resp.text
            assert "frm-ok" not in resp.text  # manifest never leaks

    def test_manifest_path_escaping_root_rejected(self, tmp_path):
        client, _ = make_client(tmp_path)
        resp = client.get("/v1/media/frame/frm-escape")
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_path"
        assert "secret" not in resp.text

    def test_no_media_root(self, tmp_path):
        client, _ = make_client(tmp_path, media=False)
        assert client.get("/v1/media/frame/frm-ok").status_code == 404


class TestServiceConfig:
    def write_env(self, tmp_path):
        frames = synth_store(1, 12, 8, 3, 0.15, kind="frame")
        audio = synth_store(2, 12, 8, 3, 0.15, kind="audio")
        save_store(frames, tmp_path / "frames.avce")
        save_store(audio, tmp_path / "audio.avce")
        make_media_root(tmp_path)
        entries = pool_entries("A", 4) + pool_entries("B", 4)
        (tmp_path / "study.json").write_text(json.dumps({
            "entries": [{"frame_id": e.frame_id, "dataset": e.dataset,
                         "sfx_system_1": e.sfx_system_1,
                         "sfx_system_2": e.sfx_system_2} for e in entries],
            "per_dataset": 4, "session_size": 4, "pool_seed": 2,
        }))
        (tmp_path / "service.json").write_text(json.dumps({
            "frame_store": "frames.avce",
            "audio_store": "audio.avce",
            "media_root": "media",
            "study_config": "study.json",
            "vote_log": "votes.jsonl",
        }))
        return tmp_path / "service.json"

    def test_load_resolves_relative_paths(self, tmp_path):
        cfg = load_service_config(self.write_env(tmp_path))
        assert cfg.frame_store == str(tmp_path / "frames.avce")
        assert cfg.audio_store == str(tmp_path / "audio.avce")
        assert cfg.media_root == str(tmp_path / "media")
        assert cfg.vote_log == str(tmp_path / "votes.jsonl")

    def test_state_from_config_serves(self, tmp_path):
        cfg = load_service_config(self.write_env(tmp_path))
        state = ServiceState.from_config(cfg)
        assert len(state.pool) == 8
        assert state.session_size == 4
        client = TestClient(create_app(state))
        assert client.get("/v1/health").status_code == 200
        body = client.post("/v1/study/session",
                           json={"rater_id": "r"}).json()
        assert len(body["items"]) == 4
        assert client.get("/v1/media/frame/frm-ok").status_code == 200

    def test_missing_required_key(self, tmp_path):
        path = tmp_path / "service.json"
        path.write_text(json.dumps({"frame_store": "frames.avce"}))
        with pytest.raises(BadConfig):
            load_service_config(path)

    def test_nonexistent_store_rejected(self, tmp_path):
        path = tmp_path / "service.json"
        path.write_text(json.dumps({"frame_store": "frames.avce",
                                    "audio_store": "audio.avce"}))
        with pytest.raises(BadConfig):
            load_service_config(path)

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(IoFailure):
            load_service_config(tmp_path / "nope.json")

    def test_missing_vote_log_dir(self, tmp_path):
        env = self.write_env(tmp_path)
        rec = json.loads(env.read_text())
        rec["vote_log"] = "no-such-dir/votes.jsonl"
        env.write_text(json.dumps(rec))
        with pytest.raises(BadConfig):
            load_service_config(env)
