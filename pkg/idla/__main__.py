from idla.cli import main

raise SystemExit(main())
