from attenmfg.cli import main

raise SystemExit(main())
