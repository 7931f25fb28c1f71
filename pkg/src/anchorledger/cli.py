"""Operator command line: online subcommands talk to a running service,
``chain verify`` and ``store verify`` audit files directly.

Exit codes: 0 success, 1 denied or untrusted, 2 usage error, 3 service or IO error.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
import time
import urllib.error
import urllib.parse
import urllib.request
from pathlib import Path
from typing import Any, Mapping, Sequence, TextIO

from . import ledger, trust

EXIT_OK = 0
EXIT_DENIED = 1
EXIT_USAGE = 2
EXIT_SERVICE = 3

SERVER_ENV = "ANCHORLEDGER_SERVER"
TOKEN_ENV = "ANCHORLEDGER_TOKEN"
DEFAULT_SERVER = "http://127.0.0.1:8080"

POLICY_HEADER = ("ACCESS POLICY NAME FOR SYSTEM FUNCTIONALITY", "STATUS", "ACTION")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(f"{self.prog}: {message}")


def format_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def policy_rows(policies: Sequence[Mapping[str, Any]]) -> list[tuple[str, str, str]]:
    rows = []
    for p in policies:
        active = p["status"] == "Activated"
        rows.append((p["functionalityName"], p["status"].upper(), "EXECUTE" if active else "ACCESS DENIED"))
    return rows


def status_exit(status: int) -> int:
    if 200 <= status < 300:
        return EXIT_OK
    if status == 400:
        return EXIT_USAGE
    if status in (401, 403, 404, 422):
        return EXIT_DENIED
    return EXIT_SERVICE


class Client:
    def __init__(self, server: str, token: str | None, timeout: float = 30.0) -> None:
        self.server = server.rstrip("/")
        self.token = token
        self.timeout = timeout

    def request(
        self, method: str, path: str, body: Any = None, query: Mapping[str, Any] | None = None
    ) -> tuple[int, Any]:
        url = self.server + path
        if query:
            q = {k: v for k, v in query.items() if v is not None}
            if q:
                url += "?" + urllib.parse.urlencode(q)
        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(url, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read() or b"null")
        except urllib.error.HTTPError as exc:
            raw = exc.read()
            try:
                return exc.code, json.loads(raw or b"null")
            except ValueError:
                return exc.code, {"error": raw.decode("utf-8", "replace")}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anchorledger", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--server", help=f"service URL (env {SERVER_ENV})")
    p.add_argument("--token", help=f"session token (env {TOKEN_ENV})")
    p.add_argument("--json", action="store_true", help="print raw JSON")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", help="run the service")
    s.add_argument("--config", required=True)

    s = sub.add_parser("login", help="exchange a user id and secret for a session token")
    s.add_argument("--user", required=True)
    s.add_argument("--secret", required=True)

    s = sub.add_parser("onboard", help="onboard a user (Controller only)")
    s.add_argument("--user", required=True)
    s.add_argument("--authority-role", choices=["Controller", "User"], default="User")
    s.add_argument("--org-role", required=True)
    s.add_argument("--secret", help="register a login secret for the new user")

    s = sub.add_parser("role", help="change a user's organisational role")
    s.add_argument("--user", required=True)
    s.add_argument("--org-role", required=True)

    for name in ("policy", "policies"):
        s = sub.add_parser(name, help="create, set status of, or list policies")
        psub = s.add_subparsers(dest="policy_cmd", required=True, parser_class=_Parser)
        c = psub.add_parser("create")
        c.add_argument("name")
        c = psub.add_parser("status")
        c.add_argument("name")
        c.add_argument("status", choices=["Activated", "Deactivated"])
        psub.add_parser("list")

    for name in ("grant", "revoke", "check"):
        s = sub.add_parser(name, help=f"{name} a user's permission on a functionality")
        s.add_argument("--user", required=True)
        s.add_argument("--functionality", required=True)

    s = sub.add_parser("audit", help="query the audit trail")
    s.add_argument("--user")
    s.add_argument("--from", dest="since", type=int)
    s.add_argument("--to", dest="until", type=int)

    s = sub.add_parser("put", help="upload and anchor a file")
    s.add_argument("file")
    s.add_argument("--functionality", required=True)
    s.add_argument("--ttl", type=int, default=86400)

    s = sub.add_parser("get", help="fetch a verified file")
    s.add_argument("hash")
    s.add_argument("--functionality", required=True)
    s.add_argument("--out", help="write content here instead of stdout")

    s = sub.add_parser("verify", help="report whether a content hash is trusted")
    s.add_argument("hash")

    s = sub.add_parser("chain", help="list the service chain, or check a chain file offline")
    csub = s.add_subparsers(dest="chain_cmd", required=True, parser_class=_Parser)
    csub.add_parser("list")
    c = csub.add_parser("verify")
    c.add_argument("file")

    s = sub.add_parser("store", help="check an off-chain store against a chain file offline")
    ssub = s.add_subparsers(dest="store_cmd", required=True, parser_class=_Parser)
    c = ssub.add_parser("verify")
    c.add_argument("dir")
    c.add_argument("chainfile")
    c.add_argument("--now", type=int, help="verification time (default: current time)")
    return p


def run_cli(
    argv: Sequence[str],
    environ: Mapping[str, str] | None = None,
    stdout: TextIO | None = None,
    stderr: TextIO | None = None,
) -> int:
    env = os.environ if environ is None else environ
    out = stdout or sys.stdout
    err = stderr or sys.stderr
    try:
        args = build_parser().parse_args(list(argv))
    except _UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    if args.cmd == "serve":
        return _serve(args, err)
    if args.cmd == "chain" and args.chain_cmd == "verify":
        return _chain_verify(args, out, err)
    if args.cmd == "store":
        return _store_verify(args, out, err)

    client = Client(args.server or env.get(SERVER_ENV, DEFAULT_SERVER), args.token or env.get(TOKEN_ENV))
    try:
        method, path, body, query = _online_request(args)
        status, payload = client.request(method, path, body, query)
    except _UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"anchorledger: cannot reach service: {exc}", file=err)
        return EXIT_SERVICE

    code = status_exit(status)
    if code == EXIT_OK and args.cmd == "verify" and payload.get("verdict") != "Trusted":
        code = EXIT_DENIED
    if args.json:
        if args.cmd == "get" and args.out and code == EXIT_OK:
            Path(args.out).write_bytes(base64.b64decode(payload["contentBase64"]))
        print(json.dumps(payload, sort_keys=True), file=out)
        return code
    if code != EXIT_OK and status >= 300:
        print(f"error {status}: {payload.get('error', payload) if isinstance(payload, dict) else payload}", file=err)
        return code
    _render(args, payload, out)
    return code


def _online_request(args: argparse.Namespace) -> tuple[str, str, Any, dict[str, Any] | None]:
    cmd = args.cmd
    if cmd == "login":
        return "POST", "/auth/login", {"userId": args.user, "secret": args.secret}, None
    if cmd == "onboard":
        body = {"userId": args.user, "authorityRole": args.authority_role, "orgRole": args.org_role}
        if args.secret is not None:
            body["secret"] = args.secret
        return "POST", "/admin/onboard", body, None
    if cmd == "role":
        return "POST", "/admin/role", {"userId": args.user, "orgRole": args.org_role}, None
    if cmd in ("policy", "policies"):
        if args.policy_cmd == "create":
            return "POST", "/admin/policy", {"functionalityName": args.name}, None
        if args.policy_cmd == "status":
            return "POST", "/admin/policy/status", {"functionalityName": args.name, "status": args.status}, None
        return "GET", "/admin/policy", None, None
    if cmd in ("grant", "revoke"):
        body = {"userId": args.user, "functionalityName": args.functionality, "grant": cmd == "grant"}
        return "POST", "/admin/permission", body, None
    if cmd == "check":
        return "GET", "/admin/check", None, {"userId": args.user, "functionality": args.functionality}
    if cmd == "audit":
        return "GET", "/admin/audit", None, {"userId": args.user, "from": args.since, "to": args.until}
    if cmd == "put":
        try:
            content = Path(args.file).read_bytes()
        except OSError as exc:
            raise _UsageError(f"cannot read {args.file}: {exc}") from exc
        body = {
            "functionalityName": args.functionality,
            "contentBase64": base64.b64encode(content).decode("ascii"),
            "ttlSeconds": args.ttl,
        }
        return "POST", "/data", body, None
    if cmd == "get":
        return "GET", f"/data/{args.hash}", None, {"functionality": args.functionality}
    if cmd == "verify":
        return "GET", f"/verify/{args.hash}", None, None
    if cmd == "chain":
        return "GET", "/chain", None, None
    raise _UsageError(f"unknown command {cmd}")


def _render(args: argparse.Namespace, payload: Any, out: TextIO) -> None:
    cmd = args.cmd
    if cmd == "login":
        print(payload["token"], file=out)
    elif cmd in ("policy", "policies") and args.policy_cmd == "list":
        print(format_table(POLICY_HEADER, policy_rows(payload)), file=out)
    elif cmd == "check":
        print("true" if payload["hasPermission"] else "false", file=out)
    elif cmd == "audit":
        rows = [(r["blockIndex"], r["timestamp"], r["userId"], r["action"], r["validAction"], r["severity"]) for r in payload]
        print(format_table(("BLOCK", "TIMESTAMP", "USER", "ACTION", "VALID", "SEVERITY"), rows), file=out)
    elif cmd == "put":
        print(f"{payload['fileContentHash']} anchored in block {payload['blockIndex']}", file=out)
        print(f"certificate {payload['certificateId']}", file=out)
    elif cmd == "get":
        content = base64.b64decode(payload["contentBase64"])
        if args.out:
            Path(args.out).write_bytes(content)
            print(f"wrote {len(content)} bytes to {args.out}", file=out)
        else:
            out.write(content.decode("utf-8", "replace"))
    elif cmd == "verify":
        _print_report(payload, out)
    elif cmd == "chain":
        rows = [(b["index"], _fmt_time(b["timestamp"]), b["kind"], b["blockHash"]) for b in payload]
        print(format_table(("BLOCK", "TIMESTAMP", "KIND", "HASH"), rows), file=out)
    else:
        print(f"ok (block {payload.get('blockIndex')})", file=out)


def _fmt_time(ts: int) -> str:
    return time.strftime("%Y-%m-%d %H:%M:%S", time.gmtime(ts))


def _print_report(report: Mapping[str, Any], out: TextIO) -> None:
    line = f"{report['fileContentHash']}: {report['verdict']}"
    if report.get("reasons"):
        line += " (" + ", ".join(report["reasons"]) + ")"
    print(line, file=out)


# ---------------------------------------------------------------------------
# Offline
# ---------------------------------------------------------------------------


def verify_chain_file(path: str | os.PathLike[str]) -> tuple[list[ledger.Block], ledger.ValidationReport]:
    """Decode and validate a chain file without repairing it.

    A partial trailing record is reported as a failure at its index.
    """
    records, truncated = ledger.parse_records(Path(path).read_bytes())
    blocks, report = ledger.validate_records(records)
    if report.valid and truncated:
        report = ledger.ValidationReport(False, len(records), "decode", "partial trailing record")
    return blocks, report


def _chain_verify(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    try:
        blocks, report = verify_chain_file(args.file)
    except OSError as exc:
        print(f"anchorledger: {exc}", file=err)
        return EXIT_SERVICE
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True), file=out)
    elif report.valid:
        print(f"valid: {len(blocks)} blocks", file=out)
    else:
        print(f"invalid at block {report.index}: {report.check} ({report.detail})", file=out)
    return EXIT_OK if report.valid else EXIT_DENIED


def _store_verify(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    try:
        blocks, report = verify_chain_file(args.chainfile)
    except OSError as exc:
        print(f"anchorledger: {exc}", file=err)
        return EXIT_SERVICE
    if not report.valid:
        print(f"chain invalid at block {report.index}: {report.check} ({report.detail})", file=err)
        return EXIT_DENIED
    if not Path(args.dir).is_dir():
        print(f"anchorledger: no store directory {args.dir}", file=err)
        return EXIT_SERVICE
    chain = ledger.Chain(tuple(blocks))
    store = trust.DirectoryStore(args.dir)
    now = int(time.time()) if args.now is None else args.now
    reports = [trust.verify(h, chain, store, now).to_dict() for h in trust.anchored_hashes(chain)]
    if args.json:
        print(json.dumps(reports, sort_keys=True), file=out)
    else:
        for r in reports:
            _print_report(r, out)
        print(f"{sum(r['verdict'] == 'Trusted' for r in reports)}/{len(reports)} anchors trusted", file=out)
    return EXIT_OK if all(r["verdict"] == "Trusted" for r in reports) else EXIT_DENIED


def _serve(args: argparse.Namespace, err: TextIO) -> int:
    import logging

    from .service import ConfigError, Service, StartupError, load_config, serve

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s [%(name)s] %(message)s")
    try:
        config = load_config(args.config)
        service = Service.startup(config)
    except ConfigError as exc:
        print(f"anchorledger: bad config: {exc}", file=err)
        return EXIT_USAGE
    except (StartupError, OSError) as exc:
        print(f"anchorledger: startup failed: {exc}", file=err)
        return EXIT_SERVICE
    host, port = config.host_port
    server = serve(service, host, port)
    print(f"listening on http://{host}:{server.server_address[1]}", file=err)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
