"""Row types for the eight dataset tables and parsers from raw records."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Any, Iterable, NamedTuple, Union
from urllib.parse import urlsplit

import regex

from .xrpc_client import (
    BLOCK,
    FOLLOW,
    POST,
    PROFILE,
    REPOST,
    Did,
    RawRecord,
    RepoDescription,
    is_did,
)

MAX_POST_GRAPHEMES = 300

# skip reason codes
MALFORMED = "malformed"
SELF_REFERENCE = "self_reference"
WRONG_TYPE = "wrong_type"
TEXT_TOO_LONG = "text_too_long"
OUTSIDE_WINDOW = "outside_window"
DUPLICATE = "duplicate"

TAG_FEATURE = "app.bsky.richtext.facet#tag"
LINK_FEATURE = "app.bsky.richtext.facet#link"
MENTION_FEATURE = "app.bsky.richtext.facet#mention"

DEFAULT_BLOB_BASE = "https://bsky.social"

_TS_RE = re.compile(
    r"^(\d{4}-\d{2}-\d{2})[T ](\d{2}:\d{2}:\d{2})(?:[.,](\d+))?(Z|z|[+-]\d{2}:?\d{2})?$"
)


class RecordError(ValueError):
    """A raw record could not become a row. ``reason`` is the skip code."""

    reason = MALFORMED

    def __init__(self, message: str, uri: str | None = None):
        super().__init__(message)
        self.uri = uri


class MalformedRecordError(RecordError):
    reason = MALFORMED


class SelfReferenceError(RecordError):
    reason = SELF_REFERENCE


class WrongTypeError(RecordError):
    reason = WRONG_TYPE


class TextTooLongError(RecordError):
    reason = TEXT_TOO_LONG


def parse_timestamp(value: Any) -> datetime:
    """Parse an ISO 8601 datetime into an aware UTC datetime truncated to seconds.

    Values without an offset are read as UTC.
    """
    if not isinstance(value, str):
        raise ValueError(f"timestamp is not a string: {value!r}")
    m = _TS_RE.match(value.strip())
    if m is None:
        raise ValueError(f"unparseable timestamp: {value!r}")
    day, clock, _frac, offset = m.groups()
    if offset is None or offset in ("Z", "z"):
        offset = "+00:00"
    elif ":" not in offset:
        offset = offset[:3] + ":" + offset[3:]
    dt = datetime.fromisoformat(f"{day}T{clock}{offset}")
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class BlockRow:
    blocker: Did
    subject: Did
    rkey: str
    created_at: datetime


@dataclass(frozen=True)
class FollowRow:
    follower: Did
    subject: Did
    rkey: str
    created_at: datetime


@dataclass(frozen=True)
class UserRow:
    did: Did
    handle: str
    display_name: str | None = None
    description: str | None = None
    avatar_url: str | None = None
    profile_created_at: datetime | None = None


@dataclass(frozen=True)
class PostRow:
    author: Did
    rkey: str
    text: str
    created_at: datetime
    reply_parent_uri: str | None = None


@dataclass(frozen=True)
class RepostRow:
    reposter: Did
    subject_uri: str
    subject_cid: str
    rkey: str
    created_at: datetime


@dataclass(frozen=True)
class TagRow:
    author: Did
    post_rkey: str
    tag: str


@dataclass(frozen=True)
class LinkRow:
    author: Did
    post_rkey: str
    uri: str


@dataclass(frozen=True)
class MentionRow:
    author: Did
    post_rkey: str
    mentioned: Did


Row = Union[BlockRow, FollowRow, UserRow, PostRow, RepostRow, TagRow, LinkRow, MentionRow]


def _require_type(raw: RawRecord, nsid: str) -> None:
    declared = raw.value.get("$type")
    if declared is not None and declared != nsid:
        raise WrongTypeError(f"expected {nsid}, record declares {declared!r}", raw.uri)
    try:
        collection = raw.collection
    except ValueError as exc:
        raise MalformedRecordError(str(exc), raw.uri) from exc
    if collection != nsid:
        raise WrongTypeError(f"expected {nsid}, uri names {collection!r}", raw.uri)


def _author_and_rkey(raw: RawRecord) -> tuple[Did, str]:
    try:
        repo, _, rkey = (raw.repo, raw.collection, raw.rkey)
    except ValueError as exc:
        raise MalformedRecordError(str(exc), raw.uri) from exc
    if not is_did(repo):
        raise MalformedRecordError(f"uri authority is not a DID: {repo!r}", raw.uri)
    return repo, rkey


def _created_at(raw: RawRecord) -> datetime:
    value = raw.value.get("createdAt")
    if value in (None, ""):
        raise MalformedRecordError("missing createdAt", raw.uri)
    try:
        return parse_timestamp(value)
    except ValueError as exc:
        raise MalformedRecordError(str(exc), raw.uri) from exc


def _subject_did(raw: RawRecord, owner: Did) -> Did:
    subject = raw.value.get("subject")
    if not subject:
        raise MalformedRecordError("missing subject", raw.uri)
    if not is_did(subject):
        raise MalformedRecordError(f"subject is not a DID: {subject!r}", raw.uri)
    if subject == owner:
        raise SelfReferenceError(f"{owner} references itself", raw.uri)
    return subject


def parse_block(raw: RawRecord) -> BlockRow:
    _require_type(raw, BLOCK)
    blocker, rkey = _author_and_rkey(raw)
    subject = _subject_did(raw, blocker)
    return BlockRow(blocker, subject, rkey, _created_at(raw))


def parse_follow(raw: RawRecord) -> FollowRow:
    _require_type(raw, FOLLOW)
    follower, rkey = _author_and_rkey(raw)
    subject = _subject_did(raw, follower)
    return FollowRow(follower, subject, rkey, _created_at(raw))


def grapheme_length(text: str) -> int:
    return len(regex.findall(r"\X", text))


def parse_post(raw: RawRecord) -> PostRow:
    _require_type(raw, POST)
    author, rkey = _author_and_rkey(raw)
    text = raw.value.get("text")
    if not isinstance(text, str):
        raise MalformedRecordError("missing text", raw.uri)
    if len(text) > MAX_POST_GRAPHEMES and grapheme_length(text) > MAX_POST_GRAPHEMES:
        raise TextTooLongError(f"post text exceeds {MAX_POST_GRAPHEMES} graphemes", raw.uri)
    created_at = _created_at(raw)
    parent_uri = None
    reply = raw.value.get("reply")
    if reply is not None:
        parent = reply.get("parent") if isinstance(reply, dict) else None
        parent_uri = parent.get("uri") if isinstance(parent, dict) else None
        if not isinstance(parent_uri, str) or not parent_uri.startswith("at://"):
            raise MalformedRecordError("reply without a parent AT-URI", raw.uri)
    return PostRow(author, rkey, text, created_at, parent_uri)


def parse_repost(raw: RawRecord) -> RepostRow:
    _require_type(raw, REPOST)
    reposter, rkey = _author_and_rkey(raw)
    subject = raw.value.get("subject")
    if not isinstance(subject, dict):
        raise MalformedRecordError("missing subject", raw.uri)
    uri, cid = subject.get("uri"), subject.get("cid")
    if not isinstance(uri, str) or not uri.startswith("at://"):
        raise MalformedRecordError("subject.uri is not an AT-URI", raw.uri)
    if not isinstance(cid, str) or not cid:
        raise MalformedRecordError("missing subject.cid", raw.uri)
    return RepostRow(reposter, uri, cid, rkey, _created_at(raw))


def _opt_str(value: Any) -> str | None:
    return value if isinstance(value, str) and value != "" else None


def avatar_url(did: Did, avatar: Any, blob_base_url: str = DEFAULT_BLOB_BASE) -> str | None:
    """Resolve a profile ``avatar`` field to a fetchable URL.

    Blob references become ``getBlob`` URLs on the given host; legacy string
    values are passed through when they are absolute http(s) URLs.
    """
    if isinstance(avatar, str):
        return avatar if _is_absolute_url(avatar) else None
    if not isinstance(avatar, dict):
        return None
    ref = avatar.get("ref")
    cid = ref.get("$link") if isinstance(ref, dict) else avatar.get("cid")
    if not isinstance(cid, str) or not cid:
        return None
    return f"{blob_base_url.rstrip('/')}/xrpc/com.atproto.sync.getBlob?did={did}&cid={cid}"


def build_user(
    desc: RepoDescription,
    profile: RawRecord | None = None,
    blob_base_url: str = DEFAULT_BLOB_BASE,
) -> UserRow:
    """Merge the describeRepo answer with the optional profile record."""
    if profile is None:
        return UserRow(desc.did, desc.handle)
    value = profile.value
    created = None
    if value.get("createdAt"):
        try:
            created = parse_timestamp(value["createdAt"])
        except ValueError:
            created = None
    return UserRow(
        did=desc.did,
        handle=desc.handle,
        display_name=_opt_str(value.get("displayName")),
        description=_opt_str(value.get("description")),
        avatar_url=avatar_url(desc.did, value.get("avatar"), blob_base_url),
        profile_created_at=created,
    )


def _is_absolute_url(value: str) -> bool:
    parts = urlsplit(value)
    return bool(parts.scheme) and bool(parts.netloc) and " " not in value


class Facets(NamedTuple):
    tags: list[TagRow]
    links: list[LinkRow]
    mentions: list[MentionRow]
    skipped: int


def extract_facets(post: RawRecord) -> Facets:
    """Collect hashtag, link and mention features from a post's facets.

    Malformed facets or features are dropped and counted in ``skipped``;
    features of other types are ignored.
    """
    tags: list[TagRow] = []
    links: list[LinkRow] = []
    mentions: list[MentionRow] = []
    skipped = 0
    author, rkey = _author_and_rkey(post)
    facets = post.value.get("facets")
    if facets is None:
        return Facets(tags, links, mentions, 0)
    if not isinstance(facets, list):
        return Facets(tags, links, mentions, 1)
    for facet in facets:
        features = facet.get("features") if isinstance(facet, dict) else None
        if not isinstance(features, list):
            skipped += 1
            continue
        for feature in features:
            kind = feature.get("$type") if isinstance(feature, dict) else None
            if kind == TAG_FEATURE:
                tag = feature.get("tag")
                tag = tag.lstrip("#") if isinstance(tag, str) else ""
                if tag.strip():
                    tags.append(TagRow(author, rkey, tag))
                else:
                    skipped += 1
            elif kind == LINK_FEATURE:
                uri = feature.get("uri")
                if isinstance(uri, str) and _is_absolute_url(uri):
                    links.append(LinkRow(author, rkey, uri))
                else:
                    skipped += 1
            elif kind == MENTION_FEATURE:
                did = feature.get("did")
                if is_did(did):
                    mentions.append(MentionRow(author, rkey, did))
                else:
                    skipped += 1
            elif not isinstance(kind, str):
                skipped += 1
    return Facets(tags, links, mentions, skipped)


PARSERS = {
    BLOCK: parse_block,
    FOLLOW: parse_follow,
    POST: parse_post,
    REPOST: parse_repost,
}

TABLE_FOR_COLLECTION = {
    BLOCK: "blocks",
    FOLLOW: "follows",
    POST: "posts",
    REPOST: "reposts",
    PROFILE: "users",
}


def row_date(row: Row) -> date | None:
    """UTC calendar date of the row's creation timestamp, if it has one."""
    ts = getattr(row, "created_at", None)
    if ts is None:
        ts = getattr(row, "profile_created_at", None)
    return ts.date() if ts is not None else None


@dataclass
class ParseBatch:
    """Rows parsed from a run of records of one collection."""

    rows: list[Row] = field(default_factory=list)
    tags: list[TagRow] = field(default_factory=list)
    links: list[LinkRow] = field(default_factory=list)
    mentions: list[MentionRow] = field(default_factory=list)
    skips: list[tuple[str, str]] = field(default_factory=list)
    facet_skips: int = 0

    @property
    def skip_counts(self) -> Counter:
        return Counter(reason for _, reason in self.skips)


def parse_records(
    collection: str,
    raws: Iterable[RawRecord],
    since: date | None = None,
    until: date | None = None,
) -> ParseBatch:
    """Parse records of one collection; every input yields a row or a skip.

    Rows whose creation date falls outside ``[since, until]`` are skipped with
    reason ``outside_window`` and contribute no facet rows.
    """
    parser = PARSERS[collection]
    batch = ParseBatch()
    for raw in raws:
        try:
            row = parser(raw)
        except RecordError as exc:
            batch.skips.append((raw.uri, exc.reason))
            continue
        day = row.created_at.date()  # type: ignore[union-attr]
        if (since is not None and day < since) or (until is not None and day > until):
            batch.skips.append((raw.uri, OUTSIDE_WINDOW))
            continue
        batch.rows.append(row)
        if collection == POST:
            facets = extract_facets(raw)
            batch.tags.extend(facets.tags)
            batch.links.extend(facets.links)
            batch.mentions.extend(facets.mentions)
            batch.facet_skips += facets.skipped
    return batch
