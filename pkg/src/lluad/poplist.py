"""The client-local popularity list: a label tree plus a load-balancing pool.

Records are keyed by (domain, type).  Domains share a tree in which chains
of single-child nodes carrying no records are merged into one node holding
several labels, so "a.b.example.com" costs one node when the intermediate
names hold nothing.  Each record occupies one answer slot at its node:

    inline        the answer bytes stored in place
    pool pointer  an index into the load-balancing pool (records whose
                  answer rotates across a set of addresses)
    cname         a reference to another name in the tree

CNAME targets are always present (closure is enforced at construction),
so a lookup never leaves the structure.  Lists are immutable; updates
produce a new list with the generation counter advanced.
"""

from __future__ import annotations

import zlib
from bisect import bisect_left
from dataclasses import dataclass
from typing import Iterable, Iterator

from .dnsmsg import DomainName, RecordAnswer, RecordKey, RecordType

MAGIC = b"LLPL"
VERSION = 1
_FLAG_COMPRESSED = 0x01

CNAME_CHAIN_LIMIT = 16


class InvariantViolation(ValueError):
    """A structural rule was broken while building or mutating a list."""


class FormatError(ValueError):
    """Serialized bytes do not follow the list wire format."""


class IndexOutOfRange(LookupError):
    """A pool entry or node reference points outside the structure."""


class UnknownRecord(LookupError):
    """An update referenced a record the list does not hold."""


@dataclass(frozen=True)
class InlineSlot:
    answer: RecordAnswer


@dataclass(frozen=True)
class PoolSlot:
    entry_index: int


@dataclass(frozen=True)
class CnameSlot:
    target: DomainName


Slot = InlineSlot | PoolSlot | CnameSlot


@dataclass(frozen=True)
class ListNode:
    """One tree node: one or more merged labels, record slots, children."""

    labels: tuple[str, ...]
    slots: tuple[Slot, ...]
    children: tuple["ListNode", ...]


@dataclass(frozen=True)
class PoolGroup:
    """All known answers for one load-balanced record, one of them active."""

    key: RecordKey
    answers: tuple[bytes, ...]
    current_index: int

    @property
    def active(self) -> bytes:
        return self.answers[self.current_index]


@dataclass(frozen=True)
class LoadBalancingPool:
    groups: tuple[PoolGroup, ...]


@dataclass(frozen=True)
class PopularityList:
    roots: tuple[ListNode, ...]
    pool: LoadBalancingPool
    generation: int = 0

    @property
    def lb_entry_order(self) -> tuple[RecordKey, ...]:
        return tuple(g.key for g in self.pool.groups)

    def same_structure(self, other: "PopularityList") -> bool:
        """Equality modulo the generation counter."""
        return self.roots == other.roots and self.pool == other.pool


@dataclass(frozen=True)
class RecordDef:
    """Source material for one record.

    `answer` is the active answer data (for CNAME records, the wire-encoded
    target name).  A nonempty `pool` marks the record load-balanced; the
    active answer must be one of the pool entries.
    """

    key: RecordKey
    answer: bytes
    pool: tuple[bytes, ...] = ()

    def __post_init__(self):
        RecordAnswer(self.key.rtype, self.answer)  # validates length/shape
        if self.pool:
            if self.key.rtype not in (RecordType.A, RecordType.AAAA):
                raise InvariantViolation("only A/AAAA records can be pooled")
            if self.answer not in self.pool:
                raise InvariantViolation("active answer missing from pool")
            for entry in self.pool:
                RecordAnswer(self.key.rtype, entry)

    @property
    def load_balanced(self) -> bool:
        return bool(self.pool)

    @property
    def cname_target(self) -> DomainName:
        return RecordAnswer(RecordType.CNAME, self.answer).cname_target


@dataclass(frozen=True)
class Hit:
    """Lookup success: the full answer chain, CNAMEs first."""

    answers: tuple[RecordAnswer, ...]


class _TrieNode:
    __slots__ = ("children", "slots")

    def __init__(self):
        self.children: dict[str, _TrieNode] = {}
        self.slots: dict[RecordType, Slot] = {}


def build_list(defs: Iterable[RecordDef], generation: int = 0) -> PopularityList:
    """Canonical constructor; the same records always build the same list."""
    by_key: dict[RecordKey, RecordDef] = {}
    for d in defs:
        if d.key in by_key:
            raise InvariantViolation(f"duplicate record {d.key}")
        by_key[d.key] = d

    names: dict[DomainName, dict[RecordType, RecordDef]] = {}
    for key, d in by_key.items():
        names.setdefault(key.name, {})[key.rtype] = d
    for name, recs in names.items():
        if RecordType.CNAME in recs and len(recs) > 1:
            raise InvariantViolation(f"{name} has a CNAME next to other records")

    cname_next: dict[DomainName, DomainName] = {}
    for key, d in by_key.items():
        if key.rtype == RecordType.CNAME:
            target = d.cname_target
            if target not in names:
                raise InvariantViolation(f"CNAME target {target} not in list")
            cname_next[key.name] = target
    for start in cname_next:
        seen = {start}
        cursor = start
        while cursor in cname_next:
            cursor = cname_next[cursor]
            if cursor in seen:
                raise InvariantViolation(f"CNAME cycle through {cursor}")
            seen.add(cursor)

    lb_keys = sorted(
        (k for k, d in by_key.items() if d.load_balanced), key=RecordKey.sort_key
    )
    entry_index = {k: i for i, k in enumerate(lb_keys)}
    groups = []
    for k in lb_keys:
        d = by_key[k]
        answers = tuple(sorted(set(d.pool)))
        groups.append(PoolGroup(k, answers, answers.index(d.answer)))

    root = _TrieNode()
    for key, d in by_key.items():
        node = root
        for label in key.name.labels:
            node = node.children.setdefault(label, _TrieNode())
        if key.rtype == RecordType.CNAME:
            slot: Slot = CnameSlot(d.cname_target)
        elif d.load_balanced:
            slot = PoolSlot(entry_index[key])
        else:
            slot = InlineSlot(RecordAnswer(key.rtype, d.answer))
        node.slots[key.rtype] = slot

    def convert(label: str, tnode: _TrieNode) -> ListNode:
        children = tuple(
            convert(lb, child) for lb, child in sorted(tnode.children.items())
        )
        slots = tuple(tnode.slots[t] for t in sorted(tnode.slots))
        if not slots and len(children) == 1:
            only = children[0]
            return ListNode((label,) + only.labels, only.slots, only.children)
        return ListNode((label,), slots, children)

    roots = tuple(convert(lb, child) for lb, child in sorted(root.children.items()))
    return PopularityList(roots, LoadBalancingPool(tuple(groups)), generation)


def _find_node(roots: tuple[ListNode, ...], labels: tuple[str, ...]) -> ListNode | None:
    nodes = roots
    i = 0
    while True:
        j = bisect_left(nodes, labels[i], key=lambda n: n.labels[0])
        if j == len(nodes) or nodes[j].labels[0] != labels[i]:
            return None
        node = nodes[j]
        span = node.labels
        if labels[i : i + len(span)] != span:
            return None
        i += len(span)
        if i == len(labels):
            return node
        nodes = node.children


def _slot_answer(plist: PopularityList, slot: Slot) -> RecordAnswer:
    if isinstance(slot, InlineSlot):
        return slot.answer
    if isinstance(slot, PoolSlot):
        if slot.entry_index >= len(plist.pool.groups):
            raise IndexOutOfRange(f"pool entry {slot.entry_index}")
        group = plist.pool.groups[slot.entry_index]
        return RecordAnswer(group.key.rtype, group.active)
    return RecordAnswer.cname(slot.target)


def _slot_rtype(plist: PopularityList, slot: Slot) -> RecordType:
    if isinstance(slot, InlineSlot):
        return slot.answer.rtype
    if isinstance(slot, PoolSlot):
        return plist.pool.groups[slot.entry_index].key.rtype
    return RecordType.CNAME


def lookup(plist: PopularityList, key: RecordKey) -> Hit | None:
    """Resolve a key, following CNAME indirections inside the list.

    Returns the complete answer chain on success, None on a miss.
    """
    answers: list[RecordAnswer] = []
    name = key.name
    for _ in range(CNAME_CHAIN_LIMIT):
        node = _find_node(plist.roots, name.labels)
        if node is None:
            return None
        typed = None
        via: CnameSlot | None = None
        for slot in node.slots:
            rt = _slot_rtype(plist, slot)
            if rt == key.rtype:
                typed = slot
                break
            if rt == RecordType.CNAME:
                via = slot
        if typed is not None:
            answers.append(_slot_answer(plist, typed))
            return Hit(tuple(answers))
        if via is None:
            return None
        answers.append(RecordAnswer.cname(via.target))
        name = via.target
    return None


def _preorder(
    plist: PopularityList,
) -> Iterator[tuple[int, tuple[str, ...], tuple[int, ...], ListNode]]:
    """Yield (index, full labels, index path from top, node) in the
    canonical preorder that serialization and node references use."""
    counter = 0
    stack = [(node, (), ()) for node in reversed(plist.roots)]
    while stack:
        node, prefix, path = stack.pop()
        full = prefix + node.labels
        here = path + (counter,)
        yield counter, full, here, node
        counter += 1
        for child in reversed(node.children):
            stack.append((child, full, here))


def node_paths(plist: PopularityList) -> dict[tuple[str, ...], tuple[int, ...]]:
    """Full label tuple -> preorder index path, for every node."""
    return {full: path for _, full, path, _ in _preorder(plist)}


def node_names(plist: PopularityList) -> list[tuple[str, ...]]:
    """Preorder index -> full label tuple."""
    return [full for _, full, _, _ in _preorder(plist)]


def iter_records(plist: PopularityList) -> Iterator[RecordDef]:
    """Recover the record definitions the list was built from."""
    for _, full, _, node in _preorder(plist):
        name = DomainName(full)
        for slot in node.slots:
            if isinstance(slot, InlineSlot):
                yield RecordDef(
                    RecordKey(name, slot.answer.rtype), slot.answer.data
                )
            elif isinstance(slot, PoolSlot):
                group = plist.pool.groups[slot.entry_index]
                yield RecordDef(group.key, group.active, group.answers)
            else:
                yield RecordDef(
                    RecordKey(name, RecordType.CNAME), slot.target.wire
                )


def record_count(plist: PopularityList) -> int:
    return sum(len(node.slots) for _, _, _, node in _preorder(plist))


def apply_lb_update(
    plist: PopularityList, entry_index: int, answer_offset: int
) -> PopularityList:
    """Rotate one pool group's active answer by a signed offset."""
    groups = plist.pool.groups
    if not 0 <= entry_index < len(groups):
        raise IndexOutOfRange(f"pool entry {entry_index} of {len(groups)}")
    group = groups[entry_index]
    moved = PoolGroup(
        group.key,
        group.answers,
        (group.current_index + answer_offset) % len(group.answers),
    )
    new_groups = groups[:entry_index] + (moved,) + groups[entry_index + 1 :]
    return PopularityList(
        plist.roots, LoadBalancingPool(new_groups), plist.generation + 1
    )


def apply_membership_update(
    plist: PopularityList,
    removals: Iterable[RecordKey] = (),
    additions: Iterable[RecordDef] = (),
) -> PopularityList:
    """Remove and upsert records, then rebuild canonically.

    A removal whose record is still referenced as a CNAME target by a
    surviving record is retained until the last referrer goes.
    """
    original = {d.key: d for d in iter_records(plist)}
    defs = dict(original)
    removed: set[RecordKey] = set()
    for key in removals:
        if key not in defs:
            raise UnknownRecord(str(key))
        del defs[key]
        removed.add(key)
    for d in additions:
        defs[d.key] = d

    while True:
        present = {k.name for k in defs}
        needed = {
            d.cname_target
            for d in defs.values()
            if d.key.rtype == RecordType.CNAME and d.cname_target not in present
        }
        restorable = [k for k in removed if k.name in needed]
        if not restorable:
            break
        for k in restorable:
            defs[k] = original[k]
            removed.discard(k)

    return build_list(defs.values(), generation=plist.generation + 1)


def _u24(value: int) -> bytes:
    if not 0 <= value < 1 << 24:
        raise FormatError(f"value {value} exceeds 24 bits")
    return value.to_bytes(3, "big")


_KIND_INLINE = 0
_KIND_POOL = 1
_KIND_CNAME = 2


def serialize(plist: PopularityList, compress: bool = False) -> bytes:
    """Encode to the list wire format.  Deterministic for equal lists."""
    paths = node_paths(plist)
    names = node_names(plist)
    index_of = {full: path[-1] for full, path in paths.items()}

    body = bytearray()
    records = 0

    def emit_node(node: ListNode, prefix: tuple[str, ...]) -> None:
        nonlocal records
        full = prefix + node.labels
        if len(node.labels) > 0xFF or len(node.slots) > 0xFF:
            raise FormatError("node exceeds format limits")
        body.append(len(node.labels))
        for label in node.labels:
            raw = label.encode("ascii")
            body.append(len(raw))
            body.extend(raw)
        body.append(len(node.slots))
        for slot in node.slots:
            records += 1
            if isinstance(slot, InlineSlot):
                body.append(_KIND_INLINE)
                body.extend(int(slot.answer.rtype).to_bytes(2, "big"))
                body.append(len(slot.answer.data))
                body.extend(slot.answer.data)
            elif isinstance(slot, PoolSlot):
                body.append(_KIND_POOL)
                body.extend(_u24(slot.entry_index))
            else:
                target_path = paths.get(slot.target.labels)
                if target_path is None:
                    raise InvariantViolation(
                        f"CNAME target {slot.target} has no node"
                    )
                body.append(_KIND_CNAME)
                if len(target_path) > 0xFF:
                    raise FormatError("reference path too deep")
                body.append(len(target_path))
                for idx in target_path:
                    body.extend(_u24(idx))
        if len(node.children) > 0xFFFF:
            raise FormatError("too many children")
        body.extend(len(node.children).to_bytes(2, "big"))
        for child in node.children:
            emit_node(child, full)

    for root in plist.roots:
        emit_node(root, ())

    for group in plist.pool.groups:
        body.extend(_u24(index_of[group.key.name.labels]))
        if len(group.answers) > 0xFF:
            raise FormatError("pool group too large")
        body.append(len(group.answers))
        body.append(group.current_index)
        for answer in group.answers:
            body.append(len(answer))
            body.extend(answer)

    payload = bytes(body)
    flags = 0
    if compress:
        payload = zlib.compress(payload, 6)
        flags |= _FLAG_COMPRESSED
    header = (
        MAGIC
        + bytes([VERSION, flags])
        + records.to_bytes(4, "big")
        + len(plist.pool.groups).to_bytes(4, "big")
    )
    return header + payload


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated list data")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u24(self) -> int:
        return int.from_bytes(self.take(3), "big")

    def done(self) -> bool:
        return self.pos == len(self.data)


class _RawNode:
    __slots__ = ("labels", "slots", "children", "full")

    def __init__(self, labels, slots, children, full):
        self.labels = labels
        self.slots = slots  # InlineSlot | PoolSlot | ("cname", path)
        self.children = children
        self.full = full


def deserialize(data: bytes, generation: int = 0) -> PopularityList:
    """Decode the list wire format, validating structural invariants."""
    if len(data) < 14:
        raise FormatError("short header")
    if data[:4] != MAGIC:
        raise FormatError("bad magic")
    if data[4] != VERSION:
        raise FormatError(f"unsupported version {data[4]}")
    flags = data[5]
    records_declared = int.from_bytes(data[6:10], "big")
    group_count = int.from_bytes(data[10:14], "big")
    payload = data[14:]
    if flags & _FLAG_COMPRESSED:
        try:
            payload = zlib.decompress(payload)
        except zlib.error as exc:
            raise FormatError(f"bad compressed payload: {exc}") from None

    reader = _Reader(payload)
    names: list[tuple[str, ...]] = []
    parents: list[int | None] = []
    records_seen = 0

    def read_node(prefix: tuple[str, ...], parent: int | None) -> _RawNode:
        nonlocal records_seen
        index = len(names)
        label_count = reader.u8()
        if label_count == 0:
            raise FormatError("node without labels")
        labels = []
        for _ in range(label_count):
            n = reader.u8()
            labels.append(reader.take(n).decode("ascii"))
        full = prefix + tuple(labels)
        names.append(full)
        parents.append(parent)
        slot_count = reader.u8()
        slots = []
        for _ in range(slot_count):
            kind = reader.u8()
            if kind == _KIND_INLINE:
                rtype = RecordType.from_code(reader.u16())
                slots.append(InlineSlot(RecordAnswer(rtype, reader.take(reader.u8()))))
            elif kind == _KIND_POOL:
                entry = reader.u24()
                if entry >= group_count:
                    raise FormatError(f"pool entry {entry} out of range")
                slots.append(PoolSlot(entry))
            elif kind == _KIND_CNAME:
                path = tuple(reader.u24() for _ in range(reader.u8()))
                if not path:
                    raise FormatError("empty reference path")
                slots.append(("cname", path))
            else:
                raise FormatError(f"unknown slot kind {kind}")
            records_seen += 1
        child_count = reader.u16()
        children = [read_node(full, index) for _ in range(child_count)]
        return _RawNode(tuple(labels), slots, children, full)

    raw_roots = []
    while records_seen < records_declared:
        raw_roots.append(read_node((), None))
    if records_seen != records_declared:
        raise FormatError("record count mismatch")

    def resolve_path(path: tuple[int, ...]) -> DomainName:
        for idx in path:
            if idx >= len(names):
                raise FormatError(f"node reference {idx} out of range")
        for a, b in zip(path, path[1:]):
            if parents[b] != a:
                raise FormatError("reference path is not an ancestor chain")
        if parents[path[0]] is not None:
            raise FormatError("reference path must start at a top node")
        return DomainName(names[path[-1]])

    pool_refs: list[int] = []

    def freeze(raw: _RawNode) -> ListNode:
        slots = []
        for slot in raw.slots:
            if isinstance(slot, tuple):
                slots.append(CnameSlot(resolve_path(slot[1])))
            else:
                if isinstance(slot, PoolSlot):
                    pool_refs.append(slot.entry_index)
                slots.append(slot)
        return ListNode(
            raw.labels, tuple(slots), tuple(freeze(c) for c in raw.children)
        )

    roots = tuple(freeze(r) for r in raw_roots)

    groups = []
    for _ in range(group_count):
        node_ref = reader.u24()
        if node_ref >= len(names):
            raise FormatError(f"pool node reference {node_ref} out of range")
        answer_count = reader.u8()
        current = reader.u8()
        if answer_count == 0 or current >= answer_count:
            raise FormatError("bad pool group counters")
        answers = []
        for _ in range(answer_count):
            answers.append(bytes(reader.take(reader.u8())))
        length = {len(a) for a in answers}
        if length == {4}:
            rtype = RecordType.A
        elif length == {16}:
            rtype = RecordType.AAAA
        else:
            raise FormatError("pool answers must be uniformly 4 or 16 bytes")
        key = RecordKey(DomainName(names[node_ref]), rtype)
        groups.append(PoolGroup(key, tuple(answers), current))
    if not reader.done():
        raise FormatError("trailing bytes")

    keys = [g.key.sort_key() for g in groups]
    if keys != sorted(keys) or len(set(keys)) != len(keys):
        raise FormatError("pool groups not in canonical order")
    if sorted(pool_refs) != list(range(group_count)):
        raise FormatError("pool entries and slots do not match one-to-one")

    plist = PopularityList(roots, LoadBalancingPool(tuple(groups)), generation)
    for group in plist.pool.groups:  # answers must be sorted and deduplicated
        if list(group.answers) != sorted(set(group.answers)):
            raise FormatError("pool answers not canonical")
    for _, full, _, node in _preorder(plist):
        for slot in node.slots:
            if isinstance(slot, PoolSlot):
                if plist.pool.groups[slot.entry_index].key.name.labels != full:
                    raise FormatError("pool group points at a different name")
    return plist
