from semstyle.cli import main

main()
