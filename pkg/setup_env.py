#!/usr/bin/env python3
"""
Setup script to create a default client configuration file
"""

import os
import sys

from cipollino.config import ClientConfig, render_config

CONFIG_FILE = "cipollino.env"


def create_config_file(path=CONFIG_FILE):
    """Write the default client configuration unless one exists"""
    if os.path.exists(path):
        print(f"⚠️  {path} already exists. Skipping creation.")
        return False

    config = ClientConfig()
    try:
        with open(path, "w") as f:
            f.write(render_config(config))
    except OSError as e:
        print(f"❌ Failed to create {path}: {e}")
        return False

    print(f"✅ {path} created successfully!")
    print("📝 Configuration:")
    print(f"   - Pool target: {config.pool_target}")
    print(f"   - Candidate budget: {config.candidate_budget}")
    print(f"   - Feed interval: {config.feed_interval_seconds}s")
    return True


def main():
    """Main setup function"""
    print("🧅 Cipollino - Client Configuration Setup")
    print("=" * 40)

    create_config_file(sys.argv[1] if len(sys.argv) > 1 else CONFIG_FILE)

    print("\n🎯 Next steps:")
    print("1. Install dependencies: pip install -r requirements.txt")
    print(f"2. Run a simulation: python3 app.py --config {CONFIG_FILE} simulate --help")
    print("3. Run the tests: python -m pytest")


if __name__ == "__main__":
    main()
