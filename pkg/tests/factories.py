"""Builders for synthetic music-domain traffic and fixture clusters."""

import json
import random
import zlib

from fastcall import clustering, filtering
from fastcall.corpus import QueryGroup, group_by_query, ingest_records
from fastcall.ner import EntityDictionary, template_for

ARTISTS = ["Jay Chou", "Fenghuang Legend", "Adele"]
SONGS = ["Fragrance of Rice", "Listen to Mom", "Blue and White Porcelain", "Rolling in the Deep"]
GENRES = ["jazz", "rock", "pop", "classical"]

TOOL_OBJS = [
    {
        "name": "control",
        "description": "Playback control.",
        "parameters": {
            "command": {
                "type": "enum",
                "required": True,
                "enum": ["Pause", "Resume", "Stop", "Next", "Previous"],
            }
        },
    },
    {
        "name": "audioSearch",
        "description": "Find and play specific music.",
        "parameters": {
            "creator_name": {"type": "string", "required": False},
            "media_name": {"type": "string", "required": False},
            "media_type": {"type": "string", "required": False},
        },
    },
    {
        "name": "intentionRecommend",
        "description": "Recommend music to the user.",
        "parameters": {"intent": {"type": "string", "required": False}},
    },
    {
        "name": "onlineSearch",
        "description": "General online search.",
        "parameters": {"keyword": {"type": "string", "required": False}},
    },
]

SLOT_MAP = {"artist": "creator_name", "song": "media_name", "genre": "intent"}
KEYWORD_TABLE = {
    "command": {
        "pause": "Pause",
        "resume": "Resume",
        "stop": "Stop",
        "next": "Next",
        "previous": "Previous",
    }
}

CONTROL_QUERIES = {
    "pause playback": "Pause",
    "stop the music": "Stop",
    "resume playing": "Resume",
    "next track please": "Next",
    "previous track": "Previous",
}

AMBIGUOUS_QUERIES = ["switch", "more of these", "don't want this"]


def record_obj(record_id, query, function, arguments, timestamp_ms=0, history=(), tools=None):
    return {
        "record_id": record_id,
        "query": query,
        "history": [{"role": r, "text": t} for r, t in history],
        "tools": tools if tools is not None else TOOL_OBJS,
        "called_function": function,
        "arguments": arguments,
        "timestamp_ms": timestamp_ms,
    }


def record_line(*args, **kwargs):
    return json.dumps(record_obj(*args, **kwargs), ensure_ascii=False)


def parse_lines(lines):
    records, diagnostics = ingest_records(line.encode("utf-8") for line in lines)
    assert not [d for d in diagnostics if d.severity == "error"], diagnostics
    return records


def dictionary_file_lines():
    lines = ["# music-domain entities"]
    lines += [f"{a}\tartist" for a in ARTISTS]
    lines += [f"{s}\tsong" for s in SONGS]
    lines += [f"{g}\tgenre" for g in GENRES]
    return lines


def music_entity_dictionary():
    entries = {a: "artist" for a in ARTISTS}
    entries.update({s: "song" for s in SONGS})
    entries.update({g: "genre" for g in GENRES})
    return EntityDictionary(entries=entries, type_priority=("song", "artist", "genre", "movie"))


def synth_corpus_lines(n, seed=11):
    """n synthetic traffic lines: search, recommend, control, and a slice
    of ambiguous queries that call different functions run to run."""
    rng = random.Random(seed)
    lines = []
    for i in range(n):
        rid = f"r{i:05d}"
        ts = rng.randrange(1_700_000_000_000, 1_700_864_000_000)
        history = []
        if rng.random() < 0.2:
            history = [("user", "hello"), ("assistant", "hi, what shall I play?")][
                : rng.randint(1, 2)
            ]
        roll = rng.random()
        if roll < 0.35:
            artist, song = rng.choice(ARTISTS), rng.choice(SONGS)
            pattern = rng.randrange(3)
            if pattern == 0:
                query, arguments = f"play {artist}'s {song}", {
                    "creator_name": artist,
                    "media_name": song,
                }
            elif pattern == 1:
                query, arguments = f"play {song} by {artist}", {
                    "creator_name": artist,
                    "media_name": song,
                }
            else:
                query, arguments = f"play some music by {artist}", {"creator_name": artist}
            if rng.random() < 0.1 and "media_name" in arguments:
                arguments = {"creator_name": arguments["creator_name"]}
            lines.append(record_line(rid, query, "audioSearch", arguments, ts, history))
        elif roll < 0.6:
            genre = rng.choice(GENRES)
            pattern = rng.randrange(3)
            query = [
                f"I want to listen to some {genre}",
                f"recommend {genre} songs",
                f"give me some {genre}",
            ][pattern]
            lines.append(record_line(rid, query, "intentionRecommend", {"intent": genre}, ts, history))
        elif roll < 0.85:
            query, command = rng.choice(sorted(CONTROL_QUERIES.items()))
            lines.append(record_line(rid, query, "control", {"command": command}, ts, history))
        else:
            query = rng.choice(AMBIGUOUS_QUERIES)
            if rng.random() < 0.5:
                lines.append(
                    record_line(rid, query, "control", {"command": rng.choice(["Next", "Stop"])}, ts)
                )
            else:
                lines.append(record_line(rid, query, "intentionRecommend", {}, ts))
    return lines


SIMPLE_TEXTS_60 = [
    "pause the playback now",
    "stop playing the music",
    "resume the playback",
    "skip to the next track",
    "go back to the previous track",
    "pause it for a moment",
    "stop everything please",
    "keep playing the song",
    "jump to the next one",
    "turn the music off",
    "halt the playback",
    "continue the music",
    "move on to another track",
    "silence the player",
    "restart the playback",
    "mute the sound output",
    "advance one track",
    "rewind to the last track",
    "bring the music back",
    "shut the player down",
]

_SIMPLE_COMMANDS = ["Pause", "Stop", "Resume", "Next", "Previous"]


def engineered_training_lines(records_per_text=10, seed=5):
    """Training traffic: 20 control queries, each pure, each well supported."""
    rng = random.Random(seed)
    lines = []
    rid = 0
    for k, text in enumerate(SIMPLE_TEXTS_60):
        command = _SIMPLE_COMMANDS[k % len(_SIMPLE_COMMANDS)]
        for _ in range(records_per_text):
            lines.append(
                record_line(
                    f"t{rid:05d}",
                    text,
                    "control",
                    {"command": command},
                    rng.randrange(1_700_000_000_000, 1_700_864_000_000),
                )
            )
            rid += 1
    return lines


def engineered_replay_lines(total=1000, coverage=0.6, seed=13):
    """Replay traffic hitting exactly `coverage` of known simple queries.

    The remainder uses queries over a disjoint character set (CJK plus
    digits, no spaces) so they share no n-grams with any exemplar.
    """
    rng = random.Random(seed)
    small_n = round(total * coverage)
    lines = []
    for i in range(small_n):
        k = i % len(SIMPLE_TEXTS_60)
        lines.append(
            record_line(
                f"e{i:05d}",
                SIMPLE_TEXTS_60[k],
                "control",
                {"command": _SIMPLE_COMMANDS[k % len(_SIMPLE_COMMANDS)]},
                rng.randrange(1_700_000_000_000, 1_700_864_000_000),
            )
        )
    for i in range(total - small_n):
        query = f"查询天气预报第{i:04d}号"
        lines.append(
            record_line(f"x{i:05d}", query, "onlineSearch", {"keyword": query}, 1_700_000_000_000 + i)
        )
    return lines


def separated_clusters(rng, n_clusters, dim=32, groups_per=3):
    """Clusters around mutually orthogonal directions, so centroid
    similarities across clusters sit far below any sane threshold."""
    import numpy as np

    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    out = []
    for c in range(n_clusters):
        members = []
        for g in range(groups_per):
            noise = rng.normal(size=dim) * 0.05
            v = basis[:, c] + noise
            v /= np.linalg.norm(v)
            text = f"cluster {c} group {g}"
            records = parse_lines(
                [
                    record_line(
                        f"c{c}g{g}r{k}", text, "control", {"command": "Pause"}, 1000 + k
                    )
                    for k in range(int(rng.integers(1, 4)))
                ]
            )
            members.append(
                clustering.ClusterMember(
                    group=QueryGroup(
                        query_text=text,
                        records=tuple(records),
                        function_histogram={"control": len(records)},
                    ),
                    embedding=v,
                    template=text,
                )
            )
        out.append(clustering.make_cluster(members))
    return out


GATEWAY_FIXTURE_TEXTS = {
    "Pause playback": "Pause",
    "Stop the music": "Stop",
    "Resume playing": "Resume",
}


def gateway_fixture_lines(records_per_text=6):
    """Pure control traffic whose texts match serving-time queries exactly."""
    lines = []
    rid = 0
    for text, command in GATEWAY_FIXTURE_TEXTS.items():
        for _ in range(records_per_text):
            lines.append(
                record_line(f"gw{rid:04d}", text, "control", {"command": command}, 1000 + rid)
            )
            rid += 1
    return lines


def build_table_from_lines(lines, vectorizer, dictionary=None, thresholds=None, tau=0.85):
    """Full offline path in memory: group, embed, cluster, label, clean."""
    from fastcall.corpus import group_by_query
    from fastcall.router import RouterThresholds, build_routing_table

    records = parse_lines(lines)
    groups = group_by_query(records)
    embeddings = vectorizer.embed_many([g.query_text for g in groups])
    clusters = clustering.cluster(list(zip(groups, embeddings)), tau, dictionary)
    labeled = filtering.label_clusters(clusters, filtering.FilterConfig())
    cleaned = [
        filtering.drop_nondominant(c) if c.label == clustering.LABEL_SIMPLE else c
        for c in labeled
    ]
    doc = clustering.snapshot_doc(cleaned, vectorizer.name, vectorizer.dimension)
    table, _diags = build_routing_table(
        cleaned,
        thresholds or RouterThresholds(),
        snapshot_id=doc["snapshot_id"],
        vectorizer_name=vectorizer.name,
        dimension=vectorizer.dimension,
    )
    return table, cleaned, records


def make_group(query, spec, tools=None, start_ts=1_700_000_000_000):
    """spec: list of (function, arguments, count)."""
    slug = zlib.crc32(query.encode("utf-8"))
    rid = 0
    lines = []
    for function, arguments, count in spec:
        for _ in range(count):
            lines.append(
                record_line(f"g{slug:08x}-{rid}", query, function, arguments, start_ts + rid, tools=tools)
            )
            rid += 1
    records = parse_lines(lines)
    groups = group_by_query(records)
    assert len(groups) == 1
    return groups[0]


def make_cluster_from_groups(groups, vectorizer, dictionary, label, dominant):
    members = [
        clustering.ClusterMember(
            group=g,
            embedding=vectorizer.embed(g.query_text),
            template=template_for(g.query_text, dictionary).pattern,
        )
        for g in groups
    ]
    return clustering.make_cluster(members, label=label, dominant_function=dominant)


PAPER_TOOL_OBJS = TOOL_OBJS + [
    {"name": "playerControl", "description": "Player control.", "parameters": {}},
    {"name": "playControl", "description": "Play control.", "parameters": {}},
    {"name": "intentRecommend", "description": "Recommendation intent.", "parameters": {}},
    {"name": "audioStop", "description": "Stop audio.", "parameters": {}},
]

PAPER_SIMPLE_CLUSTERS = [
    ("audioSearch", ["Play Jay Chou's songs", "Play some music by Jay Chou"]),
    (
        "audioSearch",
        [
            "Help me play a song by Fenghuang Legend",
            "Play me a song by Fenghuang Legend",
            "Play a song by Fenghuang Legend",
        ],
    ),
    (
        "intentionRecommend",
        [
            "I want to listen to some jazz",
            "I'm into jazz lately, recommend more to me",
            "Recommend jazz songs",
            "Give me some jazz",
            "Give me some jazz music",
        ],
    ),
    (
        "playerControl",
        ["I don't want to listen", "Don't listen", "Stop, I don't want to listen"],
    ),
]

PAPER_COMPLEX_CLUSTERS = [
    ("Switch/change", [("playControl", 3), ("intentRecommend", 3)]),
    ("More of these", [("onlineSearch", 3), ("intentRecommend", 3)]),
    ("Don't want to listen", [("playerControl", 2), ("playControl", 2), ("audioStop", 2)]),
]


def paper_fixture_clusters(vectorizer, dictionary):
    """Labeled clusters covering the published simple/complex examples.

    Built directly (not through full clustering) so the router test checks
    routing behavior against a known-correct snapshot.
    """
    config = filtering.FilterConfig()
    clusters = []
    for dominant, texts in PAPER_SIMPLE_CLUSTERS:
        groups = [
            make_group(t, [(dominant, {}, 3)], tools=PAPER_TOOL_OBJS) for t in texts
        ]
        cluster_ = make_cluster_from_groups(
            groups, vectorizer, dictionary, clustering.LABEL_UNLABELED, None
        )
        label, dom = filtering.classify_cluster(cluster_, config)
        assert (label, dom) == (clustering.LABEL_SIMPLE, dominant)
        clusters.append(clustering.relabel(cluster_, label, dom))
    for text, spec in PAPER_COMPLEX_CLUSTERS:
        group = make_group(text, [(f, {}, n) for f, n in spec], tools=PAPER_TOOL_OBJS)
        cluster_ = make_cluster_from_groups(
            [group], vectorizer, dictionary, clustering.LABEL_UNLABELED, None
        )
        label, dom = filtering.classify_cluster(cluster_, config)
        assert label == clustering.LABEL_COMPLEX
        clusters.append(clustering.relabel(cluster_, label, dom))
    return clusters
