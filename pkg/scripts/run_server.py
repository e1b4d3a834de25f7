#!/usr/bin/env python3
"""Boot the full control plane and serve the HTTP API (plus the console,
when built) from a config file.

    python scripts/run_server.py --config config.example.yaml
"""

import argparse
import logging

import uvicorn

from urgentcp.config import load_config
from urgentcp.controller import ControlPlane
from urgentcp.gateway import create_app


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="config.example.yaml")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config = load_config(args.config)
    cp = ControlPlane(config)
    cp.start()
    print(f"machines: {[m.name for m in cp.store.list_machines()]}")
    print(f"workflows: {cp.store.list_workflow_ids()}")
    print(f"API on http://{config.api.host}:{config.api.port} "
          f"(Authorization: Bearer {config.api.token})")
    try:
        uvicorn.run(create_app(cp), host=config.api.host, port=config.api.port,
                    log_level="info")
    finally:
        cp.stop()


if __name__ == "__main__":
    main()
