from pfsim.cli import main

raise SystemExit(main())
