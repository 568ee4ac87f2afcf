#!/usr/bin/env python3
"""Generate a synthetic music-domain traffic corpus plus the side files the
pipeline needs (entity dictionaries, slot map, keyword table, config).

Usage:
    python3 scripts/make_synthetic_corpus.py --out work/ --records 5000 --seed 42

Afterwards the whole offline pipeline can run against it:
    fastcall ingest  --config work/config.json --input work/raw.jsonl --out work/records.jsonl
    fastcall cluster --config work/config.json --records work/records.jsonl \
        --out work/snapshot.json --allow-small-batch
    fastcall filter  --config work/config.json --snapshot work/snapshot.json \
        --records work/records.jsonl --out work/labeled.json
"""

import argparse
import json
import random
from pathlib import Path

ARTISTS = [
    "Jay Chou", "Fenghuang Legend", "Adele", "Queen", "Miles Davis",
    "Daft Punk", "Norah Jones", "Hans Zimmer",
]
SONGS = [
    "Fragrance of Rice", "Listen to Mom", "Blue and White Porcelain",
    "Rolling in the Deep", "Bohemian Rhapsody", "So What", "Get Lucky",
    "Come Away with Me", "Time",
]
GENRES = ["jazz", "rock", "pop", "classical", "electronic", "blues"]

TOOLS = [
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

CONTROL_QUERIES = {
    "pause playback": "Pause",
    "pause it for now": "Pause",
    "stop the music": "Stop",
    "resume playing": "Resume",
    "next track please": "Next",
    "previous track": "Previous",
}

AMBIGUOUS = ["switch", "more of these", "don't want this", "change it"]

# traffic is head-heavy: most search requests hit a few popular pairs
POPULAR_PAIRS = [
    ("Jay Chou", "Fragrance of Rice"),
    ("Jay Chou", "Blue and White Porcelain"),
    ("Fenghuang Legend", "Listen to Mom"),
    ("Adele", "Rolling in the Deep"),
    ("Queen", "Bohemian Rhapsody"),
    ("Daft Punk", "Get Lucky"),
]


def make_record(rng, i):
    rid = f"r{i:06d}"
    ts = rng.randrange(1_700_000_000_000, 1_702_592_000_000)
    history = []
    if rng.random() < 0.25:
        history = [
            {"role": "user", "text": "put some music on"},
            {"role": "assistant", "text": "sure, anything specific?"},
        ][: rng.randint(1, 2)]
    roll = rng.random()
    if roll < 0.35:
        if rng.random() < 0.75:
            artist, song = rng.choice(POPULAR_PAIRS)
        else:
            artist, song = rng.choice(ARTISTS), rng.choice(SONGS)
        pattern = rng.randrange(4)
        if pattern == 0:
            query = f"play {artist}'s {song}"
            arguments = {"creator_name": artist, "media_name": song}
        elif pattern == 1:
            query = f"play {song} by {artist}"
            arguments = {"creator_name": artist, "media_name": song}
        elif pattern == 2:
            query = f"play some music by {artist}"
            arguments = {"creator_name": artist}
        else:
            query = f"play {song}"
            arguments = {"media_name": song}
        if rng.random() < 0.08 and "media_name" in arguments and "creator_name" in arguments:
            arguments.pop("media_name")  # incomplete production log
        function = "audioSearch"
    elif roll < 0.6:
        genre = rng.choice(GENRES)
        query = rng.choice(
            [
                f"I want to listen to some {genre}",
                f"recommend {genre} songs",
                f"give me some {genre}",
                f"I'm into {genre} lately, recommend more to me",
            ]
        )
        function, arguments = "intentionRecommend", {"intent": genre}
    elif roll < 0.85:
        query, command = rng.choice(sorted(CONTROL_QUERIES.items()))
        function, arguments = "control", {"command": command}
    else:
        query = rng.choice(AMBIGUOUS)
        if rng.random() < 0.5:
            function, arguments = "control", {"command": rng.choice(["Next", "Stop"])}
        else:
            function, arguments = "intentionRecommend", {}
    return {
        "record_id": rid,
        "query": query,
        "history": history,
        "tools": TOOLS,
        "called_function": function,
        "arguments": arguments,
        "timestamp_ms": ts,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--records", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)

    with (out / "raw.jsonl").open("w", encoding="utf-8") as fh:
        for i in range(args.records):
            fh.write(json.dumps(make_record(rng, i), ensure_ascii=False) + "\n")

    with (out / "entities.tsv").open("w", encoding="utf-8") as fh:
        fh.write("# music-domain entity dictionary\n")
        for artist in ARTISTS:
            fh.write(f"{artist}\tartist\n")
        for song in SONGS:
            fh.write(f"{song}\tsong\n")
        for genre in GENRES:
            fh.write(f"{genre}\tgenre\n")

    (out / "slot_map.json").write_text(
        json.dumps(
            {"artist": "creator_name", "song": "media_name", "genre": "intent"}, indent=2
        ),
        encoding="utf-8",
    )
    (out / "keyword_table.json").write_text(
        json.dumps(
            {
                "command": {
                    "pause": "Pause",
                    "resume": "Resume",
                    "continue": "Resume",
                    "stop": "Stop",
                    "next": "Next",
                    "previous": "Previous",
                }
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    config = {
        "paths": {"dictionaries": [str(out / "entities.tsv")], "snapshot_dir": str(out)},
        "thresholds": {"similarity": 0.85, "dominance": 0.9},
        "paramgen": {
            "slot_map": str(out / "slot_map.json"),
            "keyword_table": str(out / "keyword_table.json"),
        },
        "seed": args.seed,
    }
    (out / "config.json").write_text(json.dumps(config, indent=2), encoding="utf-8")
    print(f"wrote {args.records} records and side files under {out}/")


if __name__ == "__main__":
    main()
